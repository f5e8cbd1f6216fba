"""Robot-centred bird's-eye-view grid of fused descriptors.

Cells are indexed ``(i, j)`` with ``i`` along world x and ``j`` along world
y.  The grid is aligned to a world lattice of the same resolution: its
origin is stored as an integer cell offset, so scrolling never resamples.

Export layout (``export_grid``)::

    <prefix>cost.csv, <prefix>speed_limit.csv, <prefix>ood.csv, <prefix>weight.csv
        one row per i (x index), one column per j; unknown values are ``nan``
    <prefix>meta.json
        resolution, origin (metres of cell (0, 0) corner), width, height, k
    <prefix>descriptors.bin
        8-byte magic ``BEVDESC1``, then little-endian uint32 width, height, k,
        then width*height*k little-endian float32 values in (i, j, k) order
"""

from __future__ import annotations

import copy
import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .feature_space import ClusterSet, is_ood

DEFAULT_RESOLUTION = 0.5
DEFAULT_SIZE = 120
DEFAULT_BETA = 0.3
DEFAULT_WEIGHT_CAP = 100.0
DESC_MAGIC = b"BEVDESC1"


@dataclass
class CellObservation:
    index: tuple
    descriptor: np.ndarray


class BevGrid:
    """Rolling local map.

    Parameters
    ----------
    k : int
        Descriptor length.
    width, height : int
        Grid size in cells.
    resolution : float
        Metres per cell.
    origin_cell : tuple of int
        World lattice index of cell ``(0, 0)``.
    """

    def __init__(self, k: int, width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE,
                 resolution: float = DEFAULT_RESOLUTION, origin_cell=(0, 0),
                 weight_cap: float = DEFAULT_WEIGHT_CAP):
        if resolution <= 0:
            raise InvalidInputError("resolution must be positive")
        if width < 1 or height < 1 or k < 1:
            raise InvalidInputError("grid dimensions must be positive")
        self.k = int(k)
        self.width = int(width)
        self.height = int(height)
        self.resolution = float(resolution)
        self.origin_cell = (int(origin_cell[0]), int(origin_cell[1]))
        self.weight_cap = float(weight_cap)
        self.descriptor = np.zeros((self.width, self.height, self.k))
        self.weight = np.zeros((self.width, self.height))
        self.ood = np.zeros((self.width, self.height), dtype=bool)
        self.cost = np.full((self.width, self.height), np.nan)
        self.speed_limit = np.full((self.width, self.height), np.nan)
        self.skipped_observations = 0
        self._lock = threading.RLock()

    @classmethod
    def centered(cls, k: int, x: float, y: float, **kw) -> "BevGrid":
        g = cls(k, **kw)
        ci = int(np.floor(x / g.resolution)) - g.width // 2
        cj = int(np.floor(y / g.resolution)) - g.height // 2
        g.origin_cell = (ci, cj)
        return g

    @property
    def origin(self):
        return (self.origin_cell[0] * self.resolution, self.origin_cell[1] * self.resolution)

    @property
    def known(self) -> np.ndarray:
        return self.weight > 0

    def world_to_cell(self, x, y):
        """Grid indices of world points (may fall outside the grid)."""
        i = np.floor(np.asarray(x) / self.resolution).astype(np.int64) - self.origin_cell[0]
        j = np.floor(np.asarray(y) / self.resolution).astype(np.int64) - self.origin_cell[1]
        return i, j

    def lattice_to_cell(self, li, lj):
        return np.asarray(li) - self.origin_cell[0], np.asarray(lj) - self.origin_cell[1]

    def in_bounds(self, i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        return (i >= 0) & (i < self.width) & (j >= 0) & (j < self.height)

    def snapshot(self) -> "BevGrid":
        """Independent copy taken atomically with respect to integration."""
        with self._lock:
            lock = self._lock
            self._lock = None
            try:
                out = copy.deepcopy(self)
            finally:
                self._lock = lock
        out._lock = threading.RLock()
        return out

    def clear_rasters(self):
        self.cost[:] = np.nan
        self.speed_limit[:] = np.nan


def integrate(grid: BevGrid, indices, descriptors, beta: float = DEFAULT_BETA) -> BevGrid:
    """Fuse descriptor observations into the grid with an exponential moving average.

    ``indices`` is an ``(n, 2)`` integer array of grid cells and
    ``descriptors`` the matching ``(n, k)`` array.  Out-of-bounds
    observations are skipped and tallied in ``grid.skipped_observations``.
    Repeated cells in one batch are fused in order.
    """
    if not 0.0 < beta <= 1.0:
        raise InvalidInputError("beta must lie in (0, 1]")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
    desc = np.asarray(descriptors, dtype=np.float64).reshape(len(idx), -1)
    if len(idx) and desc.shape[1] != grid.k:
        raise InvalidInputError(f"descriptor length {desc.shape[1]} != grid k {grid.k}")
    with grid._lock:
        ok = grid.in_bounds(idx[:, 0], idx[:, 1])
        grid.skipped_observations += int((~ok).sum())
        idx, desc = idx[ok], desc[ok]
        while len(idx):
            flat = idx[:, 0] * grid.height + idx[:, 1]
            _, first = np.unique(flat, return_index=True)
            first.sort()
            i, j = idx[first, 0], idx[first, 1]
            d = desc[first]
            known = grid.weight[i, j] > 0
            old = grid.descriptor[i, j]
            grid.descriptor[i, j] = np.where(known[:, None], (1.0 - beta) * old + beta * d, d)
            grid.weight[i, j] = np.minimum(grid.weight[i, j] + 1.0, grid.weight_cap)
            rest = np.ones(len(idx), dtype=bool)
            rest[first] = False
            idx, desc = idx[rest], desc[rest]
    return grid


def integrate_observations(grid: BevGrid, obs, beta: float = DEFAULT_BETA) -> BevGrid:
    """``integrate`` for a list of ``CellObservation``."""
    obs = list(obs)
    if not obs:
        return grid
    return integrate(grid, [o.index for o in obs], np.stack([o.descriptor for o in obs]), beta)


def _shift_layer(a: np.ndarray, di: int, dj: int, fill):
    out = np.empty_like(a)
    out[...] = fill
    w, h = a.shape[:2]
    if abs(di) >= w or abs(dj) >= h:
        return out
    src_i = slice(max(di, 0), w + min(di, 0))
    dst_i = slice(max(-di, 0), w + min(-di, 0))
    src_j = slice(max(dj, 0), h + min(dj, 0))
    dst_j = slice(max(-dj, 0), h + min(-dj, 0))
    out[dst_i, dst_j] = a[src_i, src_j]
    return out


def scroll(grid: BevGrid, di: int, dj: int) -> BevGrid:
    """Move the grid window by whole cells; content at ``(i, j)`` lands at ``(i-di, j-dj)``."""
    di, dj = int(di), int(dj)
    if di == 0 and dj == 0:
        return grid
    with grid._lock:
        grid.descriptor = _shift_layer(grid.descriptor, di, dj, 0.0)
        grid.weight = _shift_layer(grid.weight, di, dj, 0.0)
        grid.ood = _shift_layer(grid.ood, di, dj, False)
        grid.cost = _shift_layer(grid.cost, di, dj, np.nan)
        grid.speed_limit = _shift_layer(grid.speed_limit, di, dj, np.nan)
        grid.origin_cell = (grid.origin_cell[0] + di, grid.origin_cell[1] + dj)
    return grid


def recenter(grid: BevGrid, x: float, y: float) -> tuple:
    """Scroll the smallest whole-cell amount that puts ``(x, y)`` in the central half.

    Returns the applied ``(di, dj)`` shift.
    """
    if not (np.isfinite(x) and np.isfinite(y)):
        raise InvalidInputError("pose must be finite")
    i, j = grid.world_to_cell(x, y)

    def needed(c, n):
        lo, hi = n // 4, n - n // 4 - 1
        if c < lo:
            return int(c - lo)
        if c > hi:
            return int(c - hi)
        return 0

    di, dj = needed(int(i), grid.width), needed(int(j), grid.height)
    scroll(grid, di, dj)
    return di, dj


def ood_mask(grid: BevGrid, clusters: ClusterSet) -> np.ndarray:
    """Raw OOD flags for known cells; unknown cells are never flagged."""
    mask = np.zeros((grid.width, grid.height), dtype=bool)
    known = grid.known
    if known.any():
        mask[known] = is_ood(grid.descriptor[known], clusters)
    return mask


def morphological_open(mask, radius: int = 1) -> np.ndarray:
    """Erosion then dilation with a ``(2r+1)``-square structuring element."""
    if radius < 0:
        raise InvalidInputError("radius must be non-negative")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=se, border_value=0)
    return ndimage.binary_dilation(eroded, structure=se, border_value=0)


def update_ood(grid: BevGrid, clusters: ClusterSet, radius: int = 1) -> np.ndarray:
    with grid._lock:
        grid.ood = morphological_open(ood_mask(grid, clusters), radius)
    return grid.ood


def _fmt(v) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def write_layer_csv(path: Path, layer: np.ndarray):
    with open(path, "w") as fh:
        for row in layer:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def export_grid(grid: BevGrid, out_dir, prefix: str = "") -> dict:
    """Write layer CSVs, metadata and the binary descriptor layer; return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = grid.snapshot()
    paths = {}
    for name, layer in (("cost", snap.cost), ("speed_limit", snap.speed_limit),
                        ("ood", snap.ood.astype(float)), ("weight", snap.weight)):
        p = out_dir / f"{prefix}{name}.csv"
        write_layer_csv(p, layer)
        paths[name] = p
    meta = {"resolution": snap.resolution, "origin": list(snap.origin),
            "origin_cell": list(snap.origin_cell), "width": snap.width, "height": snap.height,
            "k": snap.k, "weight_cap": snap.weight_cap,
            "layout": "rows are x index i, columns are y index j"}
    paths["meta"] = out_dir / f"{prefix}meta.json"
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths["descriptors"] = out_dir / f"{prefix}descriptors.bin"
    write_descriptors(snap.descriptor, paths["descriptors"])
    return paths


def write_descriptors(desc: np.ndarray, path) -> None:
    w, h, k = desc.shape
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<III", w, h, k))
        fh.write(np.ascontiguousarray(desc, dtype="<f4").tobytes())


def read_descriptors(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != DESC_MAGIC or len(raw) < 20:
        raise InvalidInputError(f"{path}: not a descriptor layer file")
    w, h, k = struct.unpack("<III", raw[8:20])
    if len(raw) != 20 + 4 * w * h * k:
        raise InvalidInputError(f"{path}: truncated descriptor layer")
    data = np.frombuffer(raw, dtype="<f4", offset=20)
    return data.reshape(w, h, k).astype(np.float64)


def read_csv_layer(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def load_grid(directory, prefix: str = "") -> BevGrid:
    """Rebuild a grid from ``export_grid`` output (descriptors come back as float32 values)."""
    directory = Path(directory)
    meta_path = directory / f"{prefix}meta.json"
    if not meta_path.exists():
        raise InvalidInputError(f"missing map metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    g = BevGrid(meta["k"], meta["width"], meta["height"], meta["resolution"],
                tuple(meta["origin_cell"]), meta.get("weight_cap", DEFAULT_WEIGHT_CAP))
    g.descriptor = read_descriptors(directory / f"{prefix}descriptors.bin")
    g.weight = read_csv_layer(directory / f"{prefix}weight.csv")
    g.ood = read_csv_layer(directory / f"{prefix}ood.csv") > 0.5
    g.cost = read_csv_layer(directory / f"{prefix}cost.csv")
    g.speed_limit = read_csv_layer(directory / f"{prefix}speed_limit.csv")
    return g
