"""Bounded experience store with class/speed balanced eviction and pinned labels.

Checkpoint format: JSON lines.  The first line is a header
``{"header": true, "capacity": ..., "speed_bin": ..., "strategy": ...}``;
every following line is one sample
``{"t": ..., "S": ..., "R": ..., "pinned": ..., "O": [...]}`` in insertion
order, so reloading reproduces eviction order exactly.
"""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .errors import BufferFullError, InvalidInputError
from .feature_space import nearest_class

DEFAULT_CAPACITY = 512
DEFAULT_SPEED_BIN = 1.0


@dataclass(frozen=True)
class ExperienceSample:
    descriptor: np.ndarray
    speed: float
    roughness: float
    t: float
    pinned: bool = False
    uid: int = -1
    semantic_class: int = field(default=-1, compare=False)

    def __post_init__(self):
        d = np.array(self.descriptor, dtype=np.float64)
        if d.ndim != 1 or d.size == 0 or not np.all(np.isfinite(d)):
            raise InvalidInputError("descriptor must be a finite non-empty vector")
        if not (np.isfinite(self.speed) and self.speed >= 0):
            raise InvalidInputError("speed must be finite and non-negative")
        if not (np.isfinite(self.roughness) and 0.0 <= self.roughness <= 1.0):
            raise InvalidInputError("roughness must lie in [0, 1]")
        if not np.isfinite(self.t):
            raise InvalidInputError("timestamp must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "descriptor", d)
        object.__setattr__(self, "semantic_class", nearest_class(d))


@dataclass(frozen=True)
class BufferConfig:
    capacity: int = DEFAULT_CAPACITY
    speed_bin: float = DEFAULT_SPEED_BIN
    strategy: str = "class_speed"

    def __post_init__(self):
        if self.capacity < 2:
            raise InvalidInputError("capacity must be at least 2")
        if not self.speed_bin > 0:
            raise InvalidInputError("speed bin width must be positive")
        if self.strategy not in ("class_speed", "fifo"):
            raise InvalidInputError(f"unknown eviction strategy {self.strategy!r}")


class ExperienceBuffer:
    """Single-writer buffer; ``snapshot`` hands readers an immutable tuple."""

    def __init__(self, config: BufferConfig = BufferConfig()):
        self.config = config
        self._samples = []
        self._next_uid = 0
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._samples)

    @property
    def n_pinned(self) -> int:
        return sum(s.pinned for s in self._samples)

    def samples(self) -> tuple:
        return self.snapshot()

    def snapshot(self) -> tuple:
        with self._lock:
            return tuple(self._samples)

    def _stamp(self, sample: ExperienceSample) -> ExperienceSample:
        s = ExperienceSample(sample.descriptor, float(sample.speed), float(sample.roughness),
                             float(sample.t), bool(sample.pinned), self._next_uid)
        self._next_uid += 1
        return s

    def insert(self, sample: ExperienceSample) -> list:
        """Append ``sample``; evict down to capacity. Returns evicted samples."""
        with self._lock:
            self._samples.append(self._stamp(sample))
            evicted = []
            while len(self._samples) > self.config.capacity:
                evicted.append(self._evict_locked())
            return evicted

    def add(self, descriptor, speed, roughness, t, pinned=False) -> list:
        return self.insert(ExperienceSample(descriptor, speed, roughness, t, pinned))

    def evict(self) -> ExperienceSample:
        with self._lock:
            return self._evict_locked()

    def _evict_locked(self) -> ExperienceSample:
        pos = [n for n, s in enumerate(self._samples) if not s.pinned]
        if not pos:
            raise BufferFullError("every buffered sample is pinned")

        def age(n):
            s = self._samples[n]
            return (s.t, s.uid)

        if self.config.strategy == "fifo":
            victim = min(pos, key=age)
        else:
            groups = {}
            for n in pos:
                groups.setdefault(self.pair_of(self._samples[n]), []).append(n)
            top = max(len(v) for v in groups.values())
            candidates = [min(v, key=age) for v in groups.values() if len(v) == top]
            victim = min(candidates, key=age)
        return self._samples.pop(victim)

    def pair_of(self, s: ExperienceSample) -> tuple:
        return (s.semantic_class, int(np.floor(s.speed / self.config.speed_bin)))

    def pair_counts(self, include_pinned: bool = False) -> Counter:
        return Counter(self.pair_of(s) for s in self._samples if include_pinned or not s.pinned)

    def pin(self, descriptor, roughness: float, speeds, t: float = 0.0) -> list:
        """Add one permanent sample per speed; they are never evicted."""
        speeds = list(speeds)
        with self._lock:
            if self.n_pinned + len(speeds) > self.config.capacity / 2:
                raise InvalidInputError(
                    f"pin budget exceeded: {self.n_pinned} + {len(speeds)} > "
                    f"{self.config.capacity // 2}")
            made = [self._stamp(ExperienceSample(descriptor, sp, roughness, t, True))
                    for sp in speeds]
            self._samples.extend(made)
            while len(self._samples) > self.config.capacity:
                self._evict_locked()
            return made

    def save(self, path) -> None:
        snap = self.snapshot()
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": True, "capacity": self.config.capacity,
                                 "speed_bin": self.config.speed_bin,
                                 "strategy": self.config.strategy}) + "\n")
            for s in snap:
                fh.write(json.dumps({"t": s.t, "S": s.speed, "R": s.roughness,
                                     "pinned": s.pinned, "O": s.descriptor.tolist()}) + "\n")

    @classmethod
    def load(cls, path, config: BufferConfig | None = None) -> "ExperienceBuffer":
        records = []
        header = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise InvalidInputError(f"{path}:{lineno}: bad JSON") from exc
                if rec.get("header"):
                    header = rec
                    continue
                records.append(rec)
        if config is None:
            config = BufferConfig(**{k: header[k] for k in ("capacity", "speed_bin", "strategy")}) \
                if header else BufferConfig()
        buf = cls(config)
        try:
            for rec in records:
                s = buf._stamp(ExperienceSample(rec["O"], rec["S"], rec["R"], rec["t"],
                                                bool(rec["pinned"])))
                buf._samples.append(s)
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"{path}: malformed sample record ({exc})") from exc
        while len(buf._samples) > config.capacity:
            buf._evict_locked()
        return buf


def joint_vectors(samples, speed_norm: float) -> np.ndarray:
    return np.array([np.concatenate([s.descriptor, [s.speed / speed_norm]]) for s in samples])


def avg_pairwise_distance(samples, speed_norm: float = 8.0) -> float:
    """Mean Euclidean distance over unordered pairs of ``[O ; S / speed_norm]``."""
    if isinstance(samples, ExperienceBuffer):
        samples = samples.snapshot()
    samples = list(samples)
    if len(samples) < 2:
        raise InvalidInputError("need at least two samples")
    return float(pdist(joint_vectors(samples, speed_norm)).mean())
