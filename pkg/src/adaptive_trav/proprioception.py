"""Roughness from proprioceptive vibration: weighted bandpowers and their fitting.

A roughness value is ``clip(sum_i w_i * BP(s_i, f_min_i, f_max_i), 0, 1)``
where ``BP`` integrates the periodogram of the last ``window_s`` seconds of
channel ``s_i`` over ``[f_min_i, f_max_i]``.

Annotated segments are exchanged as JSON lines, one segment per line::

    {"sample_rate": 100.0, "score": 0.35,
     "channels": {"a_x": [...], "a_y": [...], "a_z": [...]}}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from scipy import optimize, signal

from .errors import InvalidInputError

WINDOW_BOUNDS = (0.25, 2.0)


@dataclass(frozen=True)
class ChannelParams:
    name: str
    weight: float
    window_s: float
    f_min: float
    f_max: float


@dataclass(frozen=True)
class RoughnessParams:
    channels: tuple

    def channel_names(self):
        return [c.name for c in self.channels]

    def to_dict(self) -> dict:
        return {"channels": [
            {"name": c.name, "weight": float(c.weight), "window_s": float(c.window_s),
             "f_min": float(c.f_min), "f_max": float(c.f_max)} for c in self.channels
        ], "clamp": [0.0, 1.0]}

    @classmethod
    def from_dict(cls, data: dict) -> "RoughnessParams":
        try:
            chans = tuple(ChannelParams(str(c["name"]), float(c["weight"]), float(c["window_s"]),
                                        float(c["f_min"]), float(c["f_max"]))
                          for c in data["channels"])
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed roughness params: {exc}") from exc
        for c in chans:
            if c.weight < 0 or not 0 <= c.f_min < c.f_max or c.window_s <= 0:
                raise InvalidInputError(f"invalid parameters for channel {c.name}")
        return cls(chans)


DEFAULT_PARAMS = RoughnessParams((
    ChannelParams("a_x", 0.5, 1.0, 1.0, 10.0),
    ChannelParams("a_y", 0.5, 1.0, 1.0, 10.0),
    ChannelParams("a_z", 1.0, 1.0, 1.0, 15.0),
))


@dataclass(frozen=True)
class ProprioWindow:
    channels: dict
    sample_rate: float

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise InvalidInputError("sample_rate must be positive")
        chans = {k: np.asarray(v, dtype=np.float64) for k, v in self.channels.items()}
        lengths = {len(v) for v in chans.values()}
        if len(lengths) > 1:
            raise InvalidInputError("all channels must have the same length")
        if lengths and lengths.pop() < 2:
            raise InvalidInputError("channels need at least two samples")
        object.__setattr__(self, "channels", chans)

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class AnnotatedSegment:
    window: ProprioWindow
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInputError("annotation score must lie in [0, 1]")


class BandIntegrator:
    """Integral of the linearly interpolated PSD of one signal segment.

    ``power(a, b)`` integrates the piecewise-linear PSD exactly over
    ``[a, b]``, so adjacent bands add up at any split frequency.
    """

    def __init__(self, x, fs: float, method: str = "periodogram"):
        x = np.asarray(x, dtype=np.float64)
        if len(x) < 8:
            raise InvalidInputError("bandpower needs at least 8 samples")
        if method == "periodogram":
            f, p = signal.periodogram(x, fs=fs, window="hann", detrend="constant",
                                      scaling="density")
        elif method == "welch":
            f, p = signal.welch(x, fs=fs, window="hann", nperseg=min(len(x), 64),
                                detrend="constant", scaling="density")
        else:
            raise InvalidInputError(f"unknown PSD method {method!r}")
        self.fs = fs
        self.freqs = f
        self.psd = p
        self._cum = np.concatenate(([0.0], np.cumsum(np.diff(f) * (p[1:] + p[:-1]) / 2)))

    def _cumulative(self, f: float) -> float:
        i = int(np.searchsorted(self.freqs, f, side="right")) - 1
        i = min(max(i, 0), len(self.freqs) - 2)
        f0, f1 = self.freqs[i], self.freqs[i + 1]
        p0, p1 = self.psd[i], self.psd[i + 1]
        pf = p0 + (p1 - p0) * (f - f0) / (f1 - f0)
        return self._cum[i] + (f - f0) * (p0 + pf) / 2

    def power(self, f_min: float, f_max: float) -> float:
        nyq = self.fs / 2
        if not (0 <= f_min < f_max <= nyq):
            raise InvalidInputError(
                f"band [{f_min}, {f_max}] Hz must satisfy 0 <= f_min < f_max <= {nyq}")
        return max(self._cumulative(f_max) - self._cumulative(f_min), 0.0)


def bandpower(x, fs: float, f_min: float, f_max: float, method: str = "periodogram") -> float:
    """Mean-removed Hann periodogram of ``x`` integrated over ``[f_min, f_max]``.

    Parameters
    ----------
    x : array_like
        One channel, at least 8 samples.
    fs : float
        Sample rate in Hz.
    f_min, f_max : float
        Band edges in Hz, ``0 <= f_min < f_max <= fs / 2``.
    method : {"periodogram", "welch"}
        PSD estimator; the single-segment periodogram is the default.

    Returns
    -------
    float
        Band power in units of ``x**2``.
    """
    if not (0 <= f_min < f_max <= fs / 2):
        raise InvalidInputError(
            f"band [{f_min}, {f_max}] Hz must satisfy 0 <= f_min < f_max <= {fs / 2}")
    return BandIntegrator(x, fs, method).power(f_min, f_max)


def _window_samples(window_s: float, fs: float) -> int:
    return max(8, int(round(window_s * fs)))


def roughness(window: ProprioWindow, params: RoughnessParams = DEFAULT_PARAMS) -> float:
    """Weighted sum of per-channel bandpowers, clamped to ``[0, 1]``."""
    total = 0.0
    for ch in params.channels:
        if ch.name not in window.channels:
            raise InvalidInputError(f"window lacks configured channel {ch.name!r}")
        x = window.channels[ch.name]
        n = _window_samples(ch.window_s, window.sample_rate)
        if n > len(x):
            raise InvalidInputError(
                f"channel {ch.name!r} has {len(x)} samples, needs {n} for a {ch.window_s} s window")
        if ch.weight == 0:
            continue
        total += ch.weight * bandpower(x[-n:], window.sample_rate, ch.f_min, ch.f_max)
    return float(min(max(total, 0.0), 1.0))


@dataclass
class RoughnessFit:
    params: RoughnessParams
    loss: float
    start_losses: np.ndarray


def _segment_key(seg: AnnotatedSegment):
    h = hashlib.sha1()
    for name in sorted(seg.window.channels):
        h.update(name.encode())
        h.update(seg.window.channels[name].tobytes())
    h.update(repr(seg.window.sample_rate).encode())
    return (seg.score, h.hexdigest())


class _FitProblem:
    """Loss over the packed vector ``[u, window_s, fa, fb] * n_channels``."""

    def __init__(self, segments, channels, min_bandwidth):
        self.segments = sorted(segments, key=_segment_key)
        self.channels = list(channels)
        self.scores = np.array([s.score for s in self.segments])
        fs_all = [s.window.sample_rate for s in self.segments]
        self.nyq = min(fs_all) / 2
        max_dur = min(s.window.duration for s in self.segments)
        lo, hi = WINDOW_BOUNDS
        if max_dur < lo:
            raise InvalidInputError(f"segments must be at least {lo} s long")
        self.window_bounds = (lo, min(hi, max_dur))
        self.min_bandwidth = min_bandwidth
        self._cache = {}
        # weights are searched in units of 1 / (typical broadband power)
        self.weight_scale = []
        for ch in self.channels:
            powers = [self._integrator(i, ch, self._n(i, self.window_bounds[1])).power(0.0, self.nyq)
                      for i in range(len(self.segments))]
            med = float(np.median(powers))
            self.weight_scale.append(1.0 / med if med > 0 else 1.0)
        self.bounds = []
        for _ in self.channels:
            self.bounds += [(0.0, 4.0), self.window_bounds, (0.0, self.nyq), (0.0, self.nyq)]

    def _n(self, i, window_s):
        fs = self.segments[i].window.sample_rate
        return min(_window_samples(window_s, fs), self.segments[i].window.n_samples)

    def _integrator(self, i, ch, n):
        key = (i, ch, n)
        if key not in self._cache:
            w = self.segments[i].window
            if ch not in w.channels:
                raise InvalidInputError(f"segment {i} lacks channel {ch!r}")
            self._cache[key] = BandIntegrator(w.channels[ch][-n:], w.sample_rate)
        return self._cache[key]

    def decode(self, v) -> RoughnessParams:
        chans = []
        for c, ch in enumerate(self.channels):
            u, s, fa, fb = (float(t) for t in v[4 * c:4 * c + 4])
            u = min(max(u, 0.0), 4.0)
            s = min(max(s, self.window_bounds[0]), self.window_bounds[1])
            lo, hi = sorted((min(max(fa, 0.0), self.nyq), min(max(fb, 0.0), self.nyq)))
            if hi - lo < self.min_bandwidth:
                hi = min(lo + self.min_bandwidth, self.nyq)
                lo = hi - self.min_bandwidth
            chans.append(ChannelParams(ch, u * self.weight_scale[c], s, lo, hi))
        return RoughnessParams(tuple(chans))

    def predictions(self, params: RoughnessParams) -> np.ndarray:
        out = np.zeros(len(self.segments))
        for ch in params.channels:
            if ch.weight == 0:
                continue
            for i in range(len(self.segments)):
                integ = self._integrator(i, ch.name, self._n(i, ch.window_s))
                out[i] += ch.weight * integ.power(ch.f_min, ch.f_max)
        return np.clip(out, 0.0, 1.0)

    def loss_params(self, params: RoughnessParams) -> float:
        return float(np.abs(self.predictions(params) - self.scores).sum())

    def loss(self, v) -> float:
        return self.loss_params(self.decode(v))


def fit_roughness_params(segments, seed: int = 0, channels=None, n_starts: int = 64,
                         n_refine: int = 4, n_restarts: int = 6, min_bandwidth: float = 0.5,
                         maxiter: int = 2000) -> RoughnessFit:
    """Fit weights, windows and bands to annotated scores by cumulative L1 error.

    Random multistart inside the parameter box, then Nelder-Mead from the
    ``n_refine`` best starts, each restarted up to ``n_restarts`` times from
    its own optimum while that keeps improving.  Segments are put into a canonical order first,
    so the result does not depend on input order.
    """
    segments = list(segments)
    if not segments:
        raise InvalidInputError("no annotated segments supplied")
    if channels is None:
        channels = sorted(segments[0].window.channels)
    prob = _FitProblem(segments, channels, min_bandwidth)
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in prob.bounds])
    hi = np.array([b[1] for b in prob.bounds])
    starts = lo + (hi - lo) * rng.random((n_starts, len(lo)))
    start_losses = np.array([prob.loss(s) for s in starts])
    order = np.argsort(start_losses, kind="stable")
    best_v = starts[order[0]]
    best_loss = float(start_losses[order[0]])
    opts = {"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-7, "adaptive": True}
    for idx in order[:n_refine]:
        v, f = starts[idx], float(start_losses[idx])
        # a fresh simplex around the last optimum escapes most premature stalls
        for _ in range(n_restarts):
            res = optimize.minimize(prob.loss, v, method="Nelder-Mead", bounds=prob.bounds,
                                    options=opts)
            if not res.fun < f - 1e-9:
                break
            v, f = np.asarray(res.x), float(res.fun)
        if f < best_loss:
            best_loss, best_v = f, v
    params = prob.decode(best_v)
    return RoughnessFit(params=params, loss=prob.loss_params(params), start_losses=start_losses)


def segment_loss(segments, params: RoughnessParams) -> float:
    """Cumulative L1 error of ``params`` on ``segments``."""
    return float(sum(abs(roughness(s.window, params) - s.score) for s in segments))


def load_segments(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                win = ProprioWindow({k: np.asarray(v, dtype=float)
                                     for k, v in rec["channels"].items()},
                                    float(rec["sample_rate"]))
                out.append(AnnotatedSegment(win, float(rec["score"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed segment ({exc})") from exc
    return out


def save_segments(segments, path) -> None:
    with open(path, "w") as fh:
        for s in segments:
            rec = {"sample_rate": s.window.sample_rate, "score": s.score,
                   "channels": {k: v.tolist() for k, v in s.window.channels.items()}}
            fh.write(json.dumps(rec) + "\n")


def save_params(params: RoughnessParams, path) -> None:
    Path(path).write_text(yaml.safe_dump(params.to_dict(), sort_keys=False))


def load_params(path) -> RoughnessParams:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path}: not a roughness parameter file")
    return RoughnessParams.from_dict(data)
