"""Map + buffer snapshots on disk.

A snapshot is a directory holding the ``export_grid`` files, the buffer
checkpoint ``buffer.jsonl`` and a ``snapshot.json`` manifest::

    {"t": 12.0, "grid_dir": ".", "buffer": "buffer.jsonl",
     "cost_hyper": {...}, "speed_hyper": {...}, "scaling": {...},
     "risk": {...}, "s_hard_max": 8.0, "query_speed": 3.1}

The hyperparameters and risk state are those in force when the snapshot
was taken, so the models can be refitted from the buffer alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .bev_map import BevGrid, export_grid, load_grid
from .errors import InvalidInputError
from .estimator import GprHyper, InputScaling, RiskState
from .experience_buffer import ExperienceBuffer

MANIFEST = "snapshot.json"


def snapshot_name(t: float) -> str:
    return f"t{t:010.3f}"


def save_snapshot(pipe, directory, t: float) -> Path:
    """Write ``pipe``'s grid, buffer and model settings under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    export_grid(pipe.grid, d)
    pipe.buffer.save(d / "buffer.jsonl")
    cfg = pipe.config
    manifest = {"t": float(t), "grid_dir": ".", "buffer": "buffer.jsonl",
                "cost_hyper": dataclasses.asdict(cfg.cost_hyper),
                "speed_hyper": dataclasses.asdict(cfg.speed_hyper),
                "scaling": dataclasses.asdict(cfg.scaling),
                "risk": dataclasses.asdict(pipe.risk), "s_hard_max": cfg.s_hard_max,
                "query_speed": pipe.query_speed}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return d


@dataclass
class Snapshot:
    t: float
    grid: BevGrid
    buffer: ExperienceBuffer
    cost_hyper: GprHyper
    speed_hyper: GprHyper
    scaling: InputScaling
    risk: RiskState
    s_hard_max: float


def load_snapshot(path) -> Snapshot:
    """Load from a manifest file or the directory containing one."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    if not p.exists():
        raise InvalidInputError(f"snapshot manifest {p} not found")
    try:
        m = json.loads(p.read_text())
        grid = load_grid(p.parent / m.get("grid_dir", "."))
        buf = ExperienceBuffer.load(p.parent / m["buffer"])
        return Snapshot(float(m["t"]), grid, buf, GprHyper(**m["cost_hyper"]),
                        GprHyper(**m["speed_hyper"]), InputScaling(**m["scaling"]),
                        RiskState(**m["risk"]), float(m["s_hard_max"]))
    except (KeyError, TypeError, json.JSONDecodeError, FileNotFoundError) as exc:
        raise InvalidInputError(f"{p}: malformed snapshot ({exc})") from exc
