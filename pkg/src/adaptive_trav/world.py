"""Synthetic terrain worlds, a forward-looking feature sensor and vibration synthesis.

A world is a lattice of terrain class ids at a fixed resolution.  Each class
has a latent embedding mean (what a visual backbone would output for it),
per-observation embedding noise, and a ground-truth roughness curve
``g(speed) = clip(r0 + r1 * speed, 0, 1)`` with ``r0, r1 >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .feature_space import ClusterSet, vlad_descriptor
from .proprioception import DEFAULT_PARAMS, ProprioWindow, RoughnessParams


@dataclass(frozen=True)
class TerrainClass:
    name: str
    r0: float
    r1: float
    lethal: bool = False
    ood: bool = False
    noise_std: float = 0.15

    def roughness(self, speed):
        return np.clip(self.r0 + self.r1 * np.asarray(speed, dtype=float), 0.0, 1.0)


DEFAULT_CLASSES = (
    TerrainClass("trail", 0.02, 0.015),
    TerrainClass("smooth_grass", 0.05, 0.03),
    TerrainClass("rough_grass", 0.12, 0.06),
    TerrainClass("gravel", 0.08, 0.05),
    TerrainClass("tree", 1.0, 0.0, lethal=True),
    TerrainClass("foreign", 1.0, 0.0, lethal=True, ood=True),
)


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of a procedurally generated world.

    ``layout`` is ``"figure8"`` (trail loop through vegetation with tree
    clusters and one foreign-object patch) or ``"uniform"`` (every cell is
    ``fill_class``).
    """

    seed: int = 0
    layout: str = "figure8"
    size_m: tuple = (100.0, 70.0)
    resolution: float = 0.5
    embed_dim: int = 16
    mean_scale: float = 5.0
    classes: tuple = DEFAULT_CLASSES
    background: str = "smooth_grass"
    fill_class: str = "smooth_grass"
    course_half_width: float = 38.0
    course_half_height: float = 44.0
    trail_width: float = 3.0
    n_rough_patches: int = 4
    rough_radius: tuple = (3.0, 6.0)
    n_gravel_patches: int = 2
    tree_radius: float = 2.5
    n_extra_trees: int = 6
    foreign_radius: float = 1.5
    foreign_offset: float = 5.0
    waypoint_spacing: float = 25.0

    def class_names(self):
        return [c.name for c in self.classes]

    def class_index(self, name: str) -> int:
        try:
            return self.class_names().index(name)
        except ValueError:
            raise InvalidInputError(f"unknown terrain class {name!r}") from None


@dataclass
class World:
    spec: WorldSpec
    labels: np.ndarray
    means: np.ndarray
    waypoints: np.ndarray
    start: tuple
    trail_points: np.ndarray = field(default=None, repr=False)

    @property
    def resolution(self) -> float:
        return self.spec.resolution

    @property
    def classes(self):
        return self.spec.classes

    @property
    def shape(self):
        return self.labels.shape

    def lattice(self, x, y):
        r = self.spec.resolution
        return (np.floor(np.asarray(x) / r).astype(np.int64),
                np.floor(np.asarray(y) / r).astype(np.int64))

    def class_at_lattice(self, li, lj):
        li = np.asarray(li)
        lj = np.asarray(lj)
        inside = (li >= 0) & (li < self.labels.shape[0]) & (lj >= 0) & (lj < self.labels.shape[1])
        bg = self.spec.class_index(self.spec.background)
        out = np.where(inside, self.labels[np.clip(li, 0, self.labels.shape[0] - 1),
                                           np.clip(lj, 0, self.labels.shape[1] - 1)], bg)
        return int(out) if out.ndim == 0 else out

    def class_at(self, x, y):
        return self.class_at_lattice(*self.lattice(x, y))

    def true_roughness(self, class_id, speed):
        r0 = np.array([c.r0 for c in self.classes])
        r1 = np.array([c.r1 for c in self.classes])
        cid = np.asarray(class_id)
        return np.clip(r0[cid] + r1[cid] * np.asarray(speed, dtype=float), 0.0, 1.0)

    def lethal_ids(self):
        return [n for n, c in enumerate(self.classes) if c.lethal]

    def is_lethal(self, class_id) -> np.ndarray:
        return np.isin(np.asarray(class_id), self.lethal_ids())

    def sample_embeddings(self, n: int, seed: int, include_ood: bool = False,
                          balanced: bool = True) -> np.ndarray:
        """Embeddings for cluster fitting; OOD classes are excluded by default.

        ``balanced`` draws equally from every class present in the world,
        otherwise cells are drawn uniformly by area.
        """
        rng = np.random.default_rng(seed)
        present = np.unique(self.labels)
        allowed = [k for k in present if include_ood or not self.classes[k].ood]
        if balanced:
            pick = np.array(allowed)[rng.integers(len(allowed), size=n)]
        else:
            cells = np.flatnonzero(np.isin(self.labels.ravel(), allowed))
            pick = self.labels.ravel()[rng.choice(cells, size=n, replace=True)]
        return self.embed(pick, rng)

    def embed(self, class_ids, rng: np.random.Generator) -> np.ndarray:
        cid = np.asarray(class_ids)
        std = np.array([c.noise_std for c in self.classes])[cid]
        noise = rng.standard_normal((len(cid), self.means.shape[1])) * std[:, None]
        return (self.means[cid] + noise).astype(np.float32)


def _class_means(spec: WorldSpec, rng) -> np.ndarray:
    means = rng.standard_normal((len(spec.classes), spec.embed_dim)) * spec.mean_scale
    for k, c in enumerate(spec.classes):
        if c.ood:
            # push the anomaly away from everything the cluster fit will see
            others = [m for m, cc in enumerate(spec.classes) if not cc.ood]
            direction = rng.standard_normal(spec.embed_dim)
            direction /= np.abs(direction).sum()
            means[k] = means[others].mean(axis=0) + direction * spec.mean_scale * spec.embed_dim * 3
    return means


def _figure8(spec: WorldSpec, n: int = 4000):
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    cx, cy = spec.size_m[0] / 2, spec.size_m[1] / 2
    x = cx + spec.course_half_width * np.sin(t)
    y = cy + spec.course_half_height * np.sin(t) * np.cos(t)
    return np.column_stack([x, y])


def _resample(points: np.ndarray, spacing: float) -> np.ndarray:
    closed = np.vstack([points, points[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(3, int(round(s[-1] / spacing)))
    targets = np.arange(n) * (s[-1] / n)
    return np.column_stack([np.interp(targets, s, closed[:, 0]), np.interp(targets, s, closed[:, 1])])


def generate_world(spec: WorldSpec) -> World:
    """Deterministic world from ``spec.seed``."""
    names = spec.class_names()
    if len(set(names)) != len(names):
        raise InvalidInputError("terrain class names must be unique")
    for c in spec.classes:
        if c.r0 < 0 or c.r1 < 0:
            raise InvalidInputError(f"class {c.name}: roughness coefficients must be >= 0")
        if c.noise_std < 0:
            raise InvalidInputError(f"class {c.name}: noise std must be >= 0")
    if spec.resolution <= 0 or spec.embed_dim < 1:
        raise InvalidInputError("resolution and embedding dimension must be positive")
    rng = np.random.default_rng(spec.seed)
    nx = int(round(spec.size_m[0] / spec.resolution))
    ny = int(round(spec.size_m[1] / spec.resolution))
    means = _class_means(spec, rng)
    r = spec.resolution
    gx, gy = np.meshgrid((np.arange(nx) + 0.5) * r, (np.arange(ny) + 0.5) * r, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])

    if spec.layout == "uniform":
        labels = np.full((nx, ny), spec.class_index(spec.fill_class), dtype=np.int64)
        start = (spec.size_m[0] / 2, spec.size_m[1] / 2, 0.0)
        wps = np.array([[spec.size_m[0] * 0.9, spec.size_m[1] / 2],
                        [spec.size_m[0] * 0.1, spec.size_m[1] / 2]])
        return World(spec, labels, means, wps, start)
    if spec.layout != "figure8":
        raise InvalidInputError(f"unknown layout {spec.layout!r}")

    for needed in ("trail", "tree", "foreign", "rough_grass", "gravel"):
        spec.class_index(needed)
    labels = np.full(nx * ny, spec.class_index(spec.background), dtype=np.int64)
    curve = _figure8(spec)
    tree = cKDTree(curve)
    d_trail, _ = tree.query(centers)

    for _ in range(spec.n_rough_patches):
        c = rng.uniform([0, 0], spec.size_m)
        rad = rng.uniform(*spec.rough_radius)
        labels[np.hypot(*(centers - c).T) < rad] = spec.class_index("rough_grass")

    on_trail = d_trail <= spec.trail_width / 2
    labels[on_trail] = spec.class_index("trail")
    for _ in range(spec.n_gravel_patches):
        c = curve[rng.integers(len(curve))]
        labels[on_trail & (np.hypot(*(centers - c).T) < 2.5)] = spec.class_index("gravel")

    waypoints = _resample(curve, spec.waypoint_spacing)
    tree_id = spec.class_index("tree")
    clear = spec.trail_width / 2 + spec.tree_radius + 1.0
    tree_centers = []
    for a, b in zip(waypoints, np.roll(waypoints, -1, axis=0)):
        mid = (a + b) / 2
        if tree.query(mid)[0] > clear:
            tree_centers.append(mid)
    for _ in range(spec.n_extra_trees * 20):
        if len(tree_centers) >= spec.n_extra_trees + len(waypoints):
            break
        c = rng.uniform([0, 0], spec.size_m)
        # keep a drivable gap between trees so no wall closes off a lobe
        gap = min((np.hypot(*(c - t)) for t in tree_centers), default=np.inf)
        if tree.query(c)[0] > clear + 2.0 and gap > 2 * spec.tree_radius + 6.0:
            tree_centers.append(c)
    for c in tree_centers:
        labels[(np.hypot(*(centers - c).T) < spec.tree_radius) & ~on_trail] = tree_id

    # foreign object beside the trail, a quarter of the way round the loop
    k = len(curve) // 8
    tangent = curve[(k + 1) % len(curve)] - curve[k - 1]
    normal = np.array([-tangent[1], tangent[0]]) / np.hypot(*tangent)
    fc = curve[k] + normal * spec.foreign_offset
    labels[np.hypot(*(centers - fc).T) < spec.foreign_radius] = spec.class_index("foreign")

    labels = labels.reshape(nx, ny)
    heading = math.atan2(curve[1, 1] - curve[0, 1], curve[1, 0] - curve[0, 0])
    start = (float(curve[0, 0]), float(curve[0, 1]), heading)
    # first waypoint is the start point; drive towards the next one first
    waypoints = np.roll(waypoints, -1, axis=0)
    return World(spec, labels, means, waypoints, start, curve)


def class_areas(world: World) -> dict:
    counts = np.bincount(world.labels.ravel(), minlength=len(world.classes))
    cell = world.resolution ** 2
    return {c.name: float(counts[k] * cell) for k, c in enumerate(world.classes)}


@dataclass
class SensorFrame:
    cells: np.ndarray
    embeddings: np.ndarray
    descriptors: np.ndarray
    classes: np.ndarray

    def __len__(self):
        return len(self.cells)


def visible_cells(world: World, x: float, y: float, heading: float, fov: float = 20.0,
                  half_angle: float = math.radians(60.0)) -> np.ndarray:
    """World lattice cells inside the forward sector, minus ground hidden behind trees."""
    r = world.resolution
    li0, lj0 = world.lattice(x - fov, y - fov)
    li1, lj1 = world.lattice(x + fov, y + fov)
    li0, lj0 = max(int(li0), 0), max(int(lj0), 0)
    li1, lj1 = min(int(li1), world.shape[0] - 1), min(int(lj1), world.shape[1] - 1)
    if li1 < li0 or lj1 < lj0:
        return np.zeros((0, 2), dtype=np.int64)
    I, J = np.meshgrid(np.arange(li0, li1 + 1), np.arange(lj0, lj1 + 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    dx = (I + 0.5) * r - x
    dy = (J + 0.5) * r - y
    dist = np.hypot(dx, dy)
    bearing = np.arctan2(dy, dx) - heading
    bearing = (bearing + np.pi) % (2 * np.pi) - np.pi
    keep = (dist <= fov) & (np.abs(bearing) <= half_angle)
    I, J, dx, dy, dist = I[keep], J[keep], dx[keep], dy[keep], dist[keep]
    lethal_ids = [k for k, c in enumerate(world.classes) if c.lethal and not c.ood]
    if lethal_ids and len(I):
        step = r / 2
        n_steps = int(np.ceil(fov / step))
        frac = np.arange(1, n_steps + 1) * step
        px = x + dx[:, None] / np.maximum(dist[:, None], 1e-9) * frac[None]
        py = y + dy[:, None] / np.maximum(dist[:, None], 1e-9) * frac[None]
        pi, pj = world.lattice(px, py)
        before = frac[None] < dist[:, None] - r * 0.75
        own = (pi == I[:, None]) & (pj == J[:, None])
        blocked = np.isin(world.class_at_lattice(pi, pj), lethal_ids) & before & ~own
        # occluders are tall: their own cells stay visible behind one another
        tall = np.isin(world.class_at_lattice(I, J), lethal_ids)
        vis = tall | ~blocked.any(axis=1)
        I, J = I[vis], J[vis]
    return np.column_stack([I, J]).astype(np.int64)


def sense(world: World, pose, clusters: ClusterSet, rng: np.random.Generator, fov: float = 20.0,
          half_angle: float = math.radians(60.0)) -> SensorFrame:
    """Noisy embeddings and descriptors for every visible cell."""
    x, y, heading = pose[:3]
    cells = visible_cells(world, x, y, heading, fov, half_angle)
    cls = world.class_at_lattice(cells[:, 0], cells[:, 1]) if len(cells) else np.zeros(0, np.int64)
    cls = np.asarray(cls, dtype=np.int64).reshape(-1)
    emb = world.embed(cls, rng) if len(cells) else np.zeros((0, world.means.shape[1]), np.float32)
    desc = vlad_descriptor(emb.astype(np.float64), clusters) if len(cells) \
        else np.zeros((0, clusters.k))
    return SensorFrame(cells, emb, desc, cls)


def synthesize_proprio(r_true: float, duration: float = 1.0, fs: float = 100.0,
                       params: RoughnessParams = DEFAULT_PARAMS,
                       rng: np.random.Generator | None = None, speed: float = 0.0) -> ProprioWindow:
    """Band-limited Gaussian vibration whose expected roughness under ``params`` is ``r_true``.

    Each weighted channel carries an equal share of ``r_true``.  Noise is
    placed in frequency bins at least two periodogram bins inside the
    channel's band so window leakage stays in band.  ``speed`` is accepted
    for interface symmetry; the amplitude depends only on ``r_true``.
    """
    if not 0.0 <= r_true <= 1.0:
        raise InvalidInputError("r_true must lie in [0, 1]")
    n = int(round(duration * fs))
    if n < 16:
        raise InvalidInputError("duration * fs must be at least 16 samples")
    rng = np.random.default_rng() if rng is None else rng
    active = [c for c in params.channels if c.weight > 0]
    channels = {}
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    for c in params.channels:
        if c not in active or r_true == 0.0:
            channels[c.name] = np.zeros(n)
            continue
        n_win = min(n, max(8, int(round(c.window_s * fs))))
        margin = 2.0 * fs / n_win
        lo, hi = c.f_min + margin, c.f_max - margin
        band = (freqs >= lo) & (freqs <= hi) & (freqs > 0) & (freqs < fs / 2)
        if not band.any():
            mid = np.argmin(np.abs(freqs - (c.f_min + c.f_max) / 2))
            band = np.zeros_like(band)
            band[max(mid, 1)] = True
        power = r_true / len(active) / c.weight
        spec = np.zeros(len(freqs), dtype=complex)
        nb = int(band.sum())
        spec[band] = (rng.standard_normal(nb) + 1j * rng.standard_normal(nb)) / math.sqrt(2)
        scale = math.sqrt(power * n * n / (2 * nb))
        channels[c.name] = np.fft.irfft(spec, n) * scale
    return ProprioWindow(channels, fs)


def suggest_descriptor_scale(clusters: ClusterSet) -> float:
    """Length unit for GP descriptor inputs: ``sqrt(k) * tau``."""
    return math.sqrt(clusters.k) * clusters.tau
