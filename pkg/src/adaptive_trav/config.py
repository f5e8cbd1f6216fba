"""Run configuration: YAML file -> world, clusters, pipeline and planner settings.

See ``configs/example.yaml`` for an annotated file listing every key.
Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .bev_map import read_descriptors
from .errors import InvalidInputError
from .estimator import GprHyper, InputScaling, RiskState
from .experience_buffer import BufferConfig
from .feature_space import ClusterSet, fit_clusters, load_clusters
from .pipeline import PipelineConfig
from .planner import MppiParams, VehicleParams
from .proprioception import DEFAULT_PARAMS, load_params
from .sim import EpisodeConfig, Pin, class_descriptor
from .world import TerrainClass, World, WorldSpec, generate_world, suggest_descriptor_scale

SECTIONS = ("world", "clusters", "roughness_params", "output_dir", "estimator", "risk", "buffer",
            "map", "planner", "vehicle", "episode", "pins")


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


def build_dataclass(cls, data, section: str):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidInputError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidInputError(f"section {section!r}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: _tuples(v) for k, v in data.items()})
    except TypeError as exc:
        raise InvalidInputError(f"section {section!r}: {exc}") from exc


def world_spec_from_dict(data) -> WorldSpec:
    data = dict(data or {})
    if "classes" in data:
        data["classes"] = tuple(build_dataclass(TerrainClass, c, "world.classes")
                                for c in data["classes"])
    return build_dataclass(WorldSpec, data, "world")


def world_spec_to_dict(spec: WorldSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["classes"] = [dict(c) for c in d["classes"]]
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class RunConfig:
    base_dir: Path
    world: WorldSpec
    clusters_path: Path | None = None
    cluster_k: int = 32
    cluster_seed: int = 0
    cluster_samples: int = 4000
    roughness_path: Path | None = None
    output_dir: Path | None = None
    cost_hyper: GprHyper = GprHyper()
    speed_hyper: GprHyper | None = None
    descriptor_scale: float | None = None  # None: sqrt(k) * tau
    speed_norm: float = 8.0
    roughness_scale: float = 1.0
    refit_period: float = 1.0
    refit_samples: int = 16
    risk: RiskState = RiskState()
    buffer: BufferConfig = BufferConfig()
    grid_size: int = 120
    beta: float = 0.3
    weight_cap: float = 100.0
    ood_radius: int = 1
    planner: MppiParams = MppiParams()
    vehicle: VehicleParams = VehicleParams()
    episode: EpisodeConfig = EpisodeConfig()
    pins: list = field(default_factory=list)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def _section(raw: dict, name: str) -> dict:
    v = raw.get(name) or {}
    if not isinstance(v, dict):
        raise InvalidInputError(f"section {name!r} must be a mapping")
    return dict(v)


def _pop_keys(d: dict, section: str, allowed) -> dict:
    unknown = set(d) - set(allowed)
    if unknown:
        raise InvalidInputError(f"section {section!r}: unknown keys {sorted(unknown)}")
    return d


def run_config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    if not isinstance(raw, dict):
        raise InvalidInputError("config must be a mapping")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise InvalidInputError(f"unknown config sections {sorted(unknown)}")
    base = Path(base_dir)
    w = raw.get("world") or {}
    if isinstance(w, str):
        wp = Path(w) if Path(w).is_absolute() else base / w
        if not wp.exists():
            raise InvalidInputError(f"world spec file {wp} not found")
        w = yaml.safe_load(wp.read_text()) or {}
    cfg = RunConfig(base, world_spec_from_dict(w))

    cs = _pop_keys(_section(raw, "clusters"), "clusters", ("path", "k", "seed", "n_samples"))
    if cs.get("path"):
        cfg.clusters_path = cfg.path(cs["path"])
    cfg.cluster_k = int(cs.get("k", cfg.cluster_k))
    cfg.cluster_seed = int(cs.get("seed", cfg.cluster_seed))
    cfg.cluster_samples = int(cs.get("n_samples", cfg.cluster_samples))
    if cfg.cluster_k < 1 or cfg.cluster_samples < cfg.cluster_k:
        raise InvalidInputError("clusters: need 1 <= k <= n_samples")
    if raw.get("roughness_params"):
        cfg.roughness_path = cfg.path(raw["roughness_params"])
    if raw.get("output_dir"):
        cfg.output_dir = cfg.path(raw["output_dir"])

    est = _pop_keys(_section(raw, "estimator"), "estimator",
                    ("cost", "speed", "descriptor_scale", "speed_norm", "roughness_scale",
                     "refit_period", "refit_samples"))
    cfg.cost_hyper = build_dataclass(GprHyper, est.get("cost"), "estimator.cost")
    if est.get("speed") is not None:
        cfg.speed_hyper = build_dataclass(GprHyper, est["speed"], "estimator.speed")
    ds = est.get("descriptor_scale", "auto")
    cfg.descriptor_scale = None if ds in (None, "auto") else float(ds)
    cfg.speed_norm = float(est.get("speed_norm", cfg.speed_norm))
    cfg.roughness_scale = float(est.get("roughness_scale", cfg.roughness_scale))
    cfg.refit_period = float(est.get("refit_period", cfg.refit_period))
    cfg.refit_samples = int(est.get("refit_samples", cfg.refit_samples))
    if cfg.refit_period <= 0 or cfg.refit_samples < 1:
        raise InvalidInputError("estimator: refit_period must be > 0 and refit_samples >= 1")

    cfg.risk = build_dataclass(RiskState, raw.get("risk"), "risk")
    cfg.buffer = build_dataclass(BufferConfig, raw.get("buffer"), "buffer")
    mp = _pop_keys(_section(raw, "map"), "map", ("size", "beta", "weight_cap", "ood_radius"))
    cfg.grid_size = int(mp.get("size", cfg.grid_size))
    cfg.beta = float(mp.get("beta", cfg.beta))
    cfg.weight_cap = float(mp.get("weight_cap", cfg.weight_cap))
    cfg.ood_radius = int(mp.get("ood_radius", cfg.ood_radius))
    if cfg.grid_size < 4 or not 0 < cfg.beta <= 1 or cfg.ood_radius < 0:
        raise InvalidInputError("map: need size >= 4, 0 < beta <= 1, ood_radius >= 0")
    cfg.planner = build_dataclass(MppiParams, raw.get("planner"), "planner")
    cfg.vehicle = build_dataclass(VehicleParams, raw.get("vehicle"), "vehicle")
    cfg.episode = build_dataclass(EpisodeConfig, raw.get("episode"), "episode")

    pins = raw.get("pins") or []
    if not isinstance(pins, list):
        raise InvalidInputError("pins must be a list")
    for p in pins:
        if not isinstance(p, dict):
            raise InvalidInputError("each pin must be a mapping")
        _pop_keys(dict(p), "pins", ("class", "descriptor", "snapshot", "cell", "roughness",
                                    "speeds"))
        sources = [k for k in ("class", "descriptor", "snapshot") if k in p]
        if len(sources) != 1:
            raise InvalidInputError("each pin needs exactly one of class, descriptor, snapshot")
        if "snapshot" in p and "cell" not in p:
            raise InvalidInputError("snapshot pins need a cell: [i, j]")
    cfg.pins = [dict(p) for p in pins]
    for name in ("clusters_path", "roughness_path"):
        p = getattr(cfg, name)
        if p is not None and not p.exists():
            raise InvalidInputError(f"{name.replace('_path', '')} file {p} not found")
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    return run_config_from_dict(raw, path.parent)


# ---------------------------------------------------------------------------
# resolution into runtime objects

@dataclass
class Setup:
    config: RunConfig
    world: World
    clusters: ClusterSet
    pipeline: PipelineConfig
    pins: list


def resolve_clusters(cfg: RunConfig, world: World) -> ClusterSet:
    if cfg.clusters_path is not None:
        return load_clusters(cfg.clusters_path)
    samples = world.sample_embeddings(cfg.cluster_samples, cfg.cluster_seed)
    return fit_clusters(samples, cfg.cluster_k, cfg.cluster_seed)


def resolve_pipeline(cfg: RunConfig, clusters: ClusterSet) -> PipelineConfig:
    ds = cfg.descriptor_scale if cfg.descriptor_scale is not None \
        else suggest_descriptor_scale(clusters)
    scaling = InputScaling(descriptor_scale=ds, speed_norm=cfg.speed_norm,
                           roughness_scale=cfg.roughness_scale)
    speed_hyper = cfg.speed_hyper if cfg.speed_hyper is not None \
        else cfg.cost_hyper.scaled(cfg.speed_norm)
    params = load_params(cfg.roughness_path) if cfg.roughness_path is not None else DEFAULT_PARAMS
    return PipelineConfig(grid_size=cfg.grid_size, resolution=cfg.world.resolution,
                          beta=cfg.beta, weight_cap=cfg.weight_cap, ood_radius=cfg.ood_radius,
                          cost_hyper=cfg.cost_hyper, speed_hyper=speed_hyper, scaling=scaling,
                          buffer=cfg.buffer, risk=cfg.risk, refit_period=cfg.refit_period,
                          refit_samples=cfg.refit_samples, roughness_params=params,
                          s_hard_max=cfg.vehicle.s_hard_max)


def snapshot_descriptor(cfg: RunConfig, source, cell) -> np.ndarray:
    """Descriptor of ``cell`` from a snapshot manifest, snapshot directory or descriptor file."""
    p = cfg.path(source)
    if p.is_dir():
        p = p / "snapshot.json"
    if p.suffix == ".json":
        if not p.exists():
            raise InvalidInputError(f"snapshot {p} not found")
        manifest = json.loads(p.read_text())
        p = p.parent / manifest.get("grid_dir", ".") / "descriptors.bin"
    if not p.exists():
        raise InvalidInputError(f"descriptor file {p} not found")
    desc = read_descriptors(p)
    i, j = (int(c) for c in cell)
    if not (0 <= i < desc.shape[0] and 0 <= j < desc.shape[1]):
        raise InvalidInputError(f"pin cell {(i, j)} outside the snapshot grid")
    d = desc[i, j]
    if not np.any(d):
        raise InvalidInputError(f"pin cell {(i, j)} was never observed in the snapshot")
    return d


def resolve_pins(cfg: RunConfig, world: World, clusters: ClusterSet,
                 pipeline: PipelineConfig) -> list:
    out = []
    for p in cfg.pins:
        if "class" in p:
            d = class_descriptor(world, clusters, p["class"], pipeline, cfg.episode.seed,
                                 cfg.episode.fov)
        elif "descriptor" in p:
            d = np.asarray(p["descriptor"], dtype=float)
            if d.shape != (clusters.k,):
                raise InvalidInputError(f"pin descriptor must have {clusters.k} entries")
        else:
            d = snapshot_descriptor(cfg, p["snapshot"], p["cell"])
        kw = {}
        if "roughness" in p:
            kw["roughness"] = float(p["roughness"])
        if "speeds" in p:
            kw["speeds"] = tuple(float(s) for s in p["speeds"])
        out.append(Pin(tuple(float(v) for v in d), **kw))
    return out


def prepare(cfg: RunConfig) -> Setup:
    world = generate_world(cfg.world)
    clusters = resolve_clusters(cfg, world)
    if clusters.dim != cfg.world.embed_dim:
        raise InvalidInputError(f"cluster dimension {clusters.dim} does not match the world's "
                                f"embedding dimension {cfg.world.embed_dim}")
    pipeline = resolve_pipeline(cfg, clusters)
    pins = resolve_pins(cfg, world, clusters, pipeline)
    return Setup(cfg, world, clusters, pipeline, pins)
