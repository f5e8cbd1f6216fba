"""Closed-loop episodes, episode logs and offline replay.

Episode log format: JSON lines.  Line 1 is ``{"type": "header", ...}``;
then one ``{"type": "tick", ...}`` per loop tick (interleaved with
``{"type": "snapshot", "t": ..., "name": ...}`` markers), then one
``{"type": "lap", ...}`` per completed lap and a final
``{"type": "summary", ...}``.  When ``record_stream`` is on, tick records
also carry the raw sensor frame (``obs``) and vibration window
(``exp.proprio``) as base64 little-endian arrays, which is what ``replay``
consumes.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EpisodeAborted, InvalidInputError, PlannerError
from .bev_map import integrate
from .estimator import fit_speed_model, speed_limit, update_alpha_s
from .experience_buffer import ExperienceBuffer
from .feature_space import ClusterSet, vlad_descriptor
from .pipeline import PipelineConfig, TraversabilityPipeline
from .planner import MppiController, MppiParams, VehicleParams, VehicleState, dynamics_step
from .proprioception import ProprioWindow, roughness
from .world import World, sense, synthesize_proprio

LOG_VERSION = 1


@dataclass(frozen=True)
class EpisodeConfig:
    laps: int = 1
    tick: float = 0.1
    seed: int = 0
    fov: float = 20.0
    half_angle_deg: float = 60.0
    proprio_fs: float = 100.0
    proprio_duration: float = 1.0
    lookahead: float = 20.0
    lookahead_time: float = 0.0  # s; carrot also moves this many seconds of travel ahead
    lookahead_max: float = 40.0
    stuck_timeout: float = 30.0
    progress_eps: float = 1.0
    max_time: float = 0.0  # 0: 600 s per lap
    snapshot_period: float = 0.0  # 0: no snapshots
    record_stream: bool = False
    undesirable_margin: float = 0.1

    def __post_init__(self):
        if self.laps < 1 or self.tick <= 0 or self.fov <= 0:
            raise InvalidInputError("need laps >= 1, tick > 0, fov > 0")
        if self.lookahead <= 0 or self.lookahead_time < 0 or self.lookahead_max < self.lookahead:
            raise InvalidInputError("need lookahead > 0, lookahead_time >= 0, lookahead_max >= lookahead")
        if self.proprio_duration * self.proprio_fs < 16:
            raise InvalidInputError("proprio window must hold at least 16 samples")


@dataclass(frozen=True)
class Pin:
    descriptor: tuple
    roughness: float = 1.0
    speeds: tuple = (0.0, 2.0, 4.0, 6.0, 8.0)


# ---------------------------------------------------------------------------
# stream encoding

def encode_array(a, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode("ascii")


def decode_array(s: str, dtype, shape=None) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s), dtype=dtype)
    return a.reshape(shape) if shape is not None else a


def encode_window(w: ProprioWindow) -> dict:
    return {"fs": w.sample_rate,
            "channels": {k: encode_array(v, "<f8") for k, v in w.channels.items()}}


def decode_window(d: dict) -> ProprioWindow:
    return ProprioWindow({k: decode_array(v, "<f8").copy() for k, v in d["channels"].items()},
                         float(d["fs"]))


def encode_frame(cells, embeddings, classes) -> dict:
    emb = np.asarray(embeddings, dtype=np.float32)
    return {"n": int(len(cells)), "dim": int(emb.shape[1]) if emb.ndim == 2 else 0,
            "cells": encode_array(cells, "<i8"), "emb": encode_array(emb, "<f4"),
            "cls": encode_array(classes, "<i8")}


def decode_frame(d: dict):
    n, dim = d["n"], d["dim"]
    cells = decode_array(d["cells"], "<i8", (n, 2))
    emb = decode_array(d["emb"], "<f4", (n, dim))
    cls = decode_array(d["cls"], "<i8", (n,))
    return cells, emb, cls


# ---------------------------------------------------------------------------
# log container

@dataclass
class EpisodeLog:
    header: dict
    records: list = field(default_factory=list)
    laps: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def ticks(self):
        return [r for r in self.records if r["type"] == "tick"]

    def lines(self):
        yield json.dumps(self.header)
        for r in self.records:
            yield json.dumps(r)
        for lap in self.laps:
            yield json.dumps(lap)
        if self.summary:
            yield json.dumps(self.summary)

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def read(cls, path):
        """Parse a log; returns ``(log, n_warnings)``.

        Reading stops at the first unparsable or incomplete line, so a
        truncated file yields every complete record before the cut.
        """
        header = None
        log = None
        warnings = 0
        with open(path) as fh:
            text = fh.read()
        lines = text.split("\n")
        for line in lines:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                warnings += 1
                break
            kind = rec.get("type")
            if header is None:
                if kind != "header":
                    raise InvalidInputError(f"{path}: first record is not a header")
                header = rec
                log = cls(header)
            elif kind in ("tick", "snapshot"):
                log.records.append(rec)
            elif kind == "lap":
                log.laps.append(rec)
            elif kind == "summary":
                log.summary = rec
            else:
                warnings += 1
        if log is None:
            raise InvalidInputError(f"{path}: empty log")
        return log, warnings

    def metrics_table(self) -> str:
        cols = ["lap", "interventions", "lethal_ticks", "undesirable_ticks", "avg_speed",
                "avg_roughness", "duration"]
        out = [",".join(cols)]
        for lap in self.laps:
            out.append(",".join(repr(lap[c]) if isinstance(lap[c], float) else str(lap[c])
                                for c in cols))
        return "\n".join(out) + "\n"


def _lap_metrics(lap: int, ticks: list) -> dict:
    speeds = [r["speed"] for r in ticks]
    rough = [r["exp"]["R"] for r in ticks]
    entries = 0
    prev = False
    for r in ticks:
        if r["lethal"] and not prev:
            entries += 1
        prev = r["lethal"]
    return {"type": "lap", "lap": lap, "ticks": len(ticks),
            "interventions": entries,
            "lethal_ticks": sum(r["lethal"] for r in ticks),
            "undesirable_ticks": sum(r["undesirable"] for r in ticks),
            "avg_speed": float(np.mean(speeds)) if speeds else 0.0,
            "avg_roughness": float(np.mean(rough)) if rough else 0.0,
            "duration": float(ticks[-1]["t"] - ticks[0]["t"]) if ticks else 0.0}


def _class_table(world: World) -> list:
    return [{"name": c.name, "r0": c.r0, "r1": c.r1, "lethal": c.lethal, "ood": c.ood}
            for c in world.classes]


def true_cost(class_table: list, class_ids, speed: float) -> np.ndarray:
    """Ground-truth cost of cells: roughness at ``speed``; lethal classes cost 1."""
    r0 = np.array([c["r0"] for c in class_table])
    r1 = np.array([c["r1"] for c in class_table])
    lethal = np.array([c["lethal"] for c in class_table])
    cid = np.asarray(class_ids, dtype=np.int64)
    g = np.clip(r0[cid] + r1[cid] * speed, 0.0, 1.0)
    return np.where(lethal[cid], 1.0, g)


def _seed_for(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, 3, n]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# pins sourced from the world

def class_descriptor(world: World, clusters: ClusterSet, class_name: str,
                     pipeline: PipelineConfig = PipelineConfig(), seed: int = 0,
                     fov: float = 20.0) -> np.ndarray:
    """Pick one fused map descriptor of ``class_name``, as an operator would click it.

    A scratch map is built from a few frames taken 8 m in front of the
    nearest cell of that class; the best-observed cell of the class wins.
    """
    cid = world.spec.class_index(class_name)
    cells = np.argwhere(world.labels == cid)
    if len(cells) == 0:
        raise InvalidInputError(f"class {class_name!r} does not occur in the world")
    r = world.resolution
    sx, sy = world.start[:2]
    centers = (cells + 0.5) * r
    target = centers[np.argmin(np.hypot(centers[:, 0] - sx, centers[:, 1] - sy))]
    away = np.array([sx, sy]) - target
    nrm = np.hypot(*away)
    away = away / nrm if nrm > 0 else np.array([1.0, 0.0])
    vx, vy = target + away * 8.0
    heading = math.atan2(target[1] - vy, target[0] - vx)
    pipe = TraversabilityPipeline(clusters, pipeline, vx, vy)
    rng = np.random.default_rng([seed, 4])
    for _ in range(5):
        frame = sense(world, (vx, vy, heading), clusters, rng, fov)
        gi, gj = pipe.grid.lattice_to_cell(frame.cells[:, 0], frame.cells[:, 1])
        integrate(pipe.grid, np.column_stack([gi, gj]), frame.descriptors, pipeline.beta)
    grid = pipe.grid
    li = np.arange(grid.width) + grid.origin_cell[0]
    lj = np.arange(grid.height) + grid.origin_cell[1]
    LI, LJ = np.meshgrid(li, lj, indexing="ij")
    of_class = (world.class_at_lattice(LI, LJ) == cid) & grid.known
    if not of_class.any():
        raise InvalidInputError(f"no {class_name!r} cell visible for pinning")
    w = np.where(of_class, grid.weight, -1.0)
    i, j = np.unravel_index(np.argmax(w), w.shape)
    return grid.descriptor[i, j].copy()


# ---------------------------------------------------------------------------
# closed loop

class Route:
    """Closed polyline through the waypoints, parameterised by arc length."""

    def __init__(self, waypoints):
        pts = np.asarray(waypoints, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise InvalidInputError("route needs at least two 2-D waypoints")
        self.points = np.vstack([pts, pts[:1]])
        seg = np.hypot(*np.diff(self.points, axis=0).T)
        if np.any(seg <= 0):
            raise InvalidInputError("consecutive waypoints must differ")
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.cum[-1])

    def point_at(self, s):
        s = np.mod(s, self.length)
        return np.column_stack([np.interp(s, self.cum, self.points[:, 0]),
                                np.interp(s, self.cum, self.points[:, 1])])

    def segment(self, s: float) -> int:
        return int(np.searchsorted(self.cum, s % self.length, side="right") - 1)

    def project(self, x: float, y: float, s_hint=None, back: float = 2.0,
                ahead: float = 10.0, step: float = 0.25) -> float:
        """Arc length of the closest route point, searched near ``s_hint`` when given.

        The search window keeps the projection from jumping across
        self-intersections of the route.
        """
        if s_hint is None:
            cand = np.arange(0.0, self.length, step)
        else:
            cand = s_hint + np.arange(-back, ahead + step / 2, step)
        p = self.point_at(cand)
        return float(cand[np.argmin(np.hypot(p[:, 0] - x, p[:, 1] - y))])


def run_episode(world: World, clusters: ClusterSet, episode: EpisodeConfig = EpisodeConfig(),
                pipeline: PipelineConfig = PipelineConfig(), planner: MppiParams = MppiParams(),
                vehicle: VehicleParams = VehicleParams(), pins=(), on_snapshot=None,
                on_tick=None) -> EpisodeLog:
    """Drive ``episode.laps`` laps of the world's waypoint loop.

    Per tick: sense, fuse and (when due) refit/rasterise, plan, step the
    vehicle, synthesise the vibration window of the cell entered, then
    measure roughness, store the experience and update the speed risk.
    ``on_snapshot(t, pipe)`` is called at the snapshot cadence and returns
    a name recorded in the log.  Raises ``EpisodeAborted`` (with the
    partial log attached) when no progress is made for ``stuck_timeout``.
    """
    x0, y0, h0 = world.start
    pipe = TraversabilityPipeline(clusters, pipeline, x0, y0)
    pin_records = []
    for p in pins:
        pipe.pin(np.asarray(p.descriptor, float), p.roughness, p.speeds, 0.0)
        pin_records.append({"descriptor": [float(v) for v in p.descriptor],
                            "roughness": float(p.roughness),
                            "speeds": [float(s) for s in p.speeds]})
    classes = _class_table(world)
    header = {"type": "header", "version": LOG_VERSION, "tick": episode.tick,
              "seed": episode.seed, "world_seed": world.spec.seed, "laps": episode.laps,
              "start": [float(x0), float(y0), float(h0)], "r_max": pipe.risk.r_max,
              "alpha_r": pipe.risk.alpha_r, "classes": classes, "pins": pin_records,
              "waypoints": world.waypoints.tolist(), "record_stream": episode.record_stream}
    log = EpisodeLog(header)
    ctrl = MppiController(planner, vehicle)
    sensor_rng = np.random.default_rng([episode.seed, 1])
    proprio_rng = np.random.default_rng([episode.seed, 2])
    half_angle = math.radians(episode.half_angle_deg)
    max_time = episode.max_time if episode.max_time > 0 else 600.0 * episode.laps
    lethal_ids = set(world.lethal_ids())
    r_bad = pipe.risk.r_max + episode.undesirable_margin

    state = VehicleState(float(x0), float(y0), float(h0))
    route = Route(world.waypoints)
    s0 = route.project(x0, y0)
    s_now = best_s = s0
    lap = 0
    last_progress = 0.0
    next_snapshot = episode.snapshot_period if episode.snapshot_period > 0 else math.inf
    lap_ticks = []
    n = 0
    while True:
        t = round(n * episode.tick, 9)
        if t > max_time:
            break
        if t - last_progress > episode.stuck_timeout:
            log.laps.append(_lap_metrics(lap, lap_ticks))
            log.summary = {"type": "summary", "aborted": True, "t": t,
                           "reason": f"no progress along the route for "
                                     f"{episode.stuck_timeout} s"}
            raise EpisodeAborted(f"vehicle stuck at ({state.x:.1f}, {state.y:.1f}) t={t:.1f} s",
                                 log)
        ahead = min(episode.lookahead + episode.lookahead_time * state.speed, episode.lookahead_max)
        goal = route.point_at(s_now + ahead)[0]
        wp = route.segment(s_now)

        # perception and estimation
        frame = sense(world, (state.x, state.y, state.heading), clusters, sensor_rng,
                      episode.fov, half_angle)
        refit = pipe.perceive(t, state.x, state.y, frame.cells, frame.descriptors, state.speed)

        # planning and motion
        try:
            res = ctrl.plan(state, pipe.grid, goal, _seed_for(episode.seed, n))
            control = res.controls[0]
            plan_min, plan_mean = res.min_cost, res.mean_cost
        except PlannerError:
            control = np.array([-vehicle.max_decel, 0.0])
            plan_min = plan_mean = None
        new_state = dynamics_step(state, control, episode.tick, vehicle)

        # experience from the cell just entered
        cid = world.class_at(new_state.x, new_state.y)
        r_true = float(world.true_roughness(cid, new_state.speed))
        window = synthesize_proprio(r_true, episode.proprio_duration, episode.proprio_fs,
                                    pipeline.roughness_params, proprio_rng, new_state.speed)
        exp = pipe.experience(round(t + episode.tick, 9), new_state.x, new_state.y, new_state.speed, window)

        lethal = cid in lethal_ids
        rec = {"type": "tick", "n": n, "t": t, "x": state.x, "y": state.y,
               "heading": state.heading, "speed": state.speed, "steer": state.steer,
               "lap": lap, "wp": wp, "accel": float(control[0]),
               "steer_rate": float(control[1]),
               "cmd_speed": float(min(max(state.speed + control[0] * episode.tick, 0.0),
                                      vehicle.s_hard_max)),
               "plan_min": plan_min, "plan_mean": plan_mean, "refit": refit,
               "query_speed": pipe.query_speed, "class": int(cid), "lethal": bool(lethal),
               "undesirable": bool(r_true > r_bad),
               "exp": {"t": round(t + episode.tick, 9), "x": new_state.x, "y": new_state.y,
                       "speed": new_state.speed, "R": exp.roughness, "R_true": r_true,
                       "alpha_s": exp.alpha_s, "limit": exp.speed_limit,
                       "inserted": exp.inserted}}
        if episode.record_stream:
            rec["obs"] = encode_frame(frame.cells, frame.embeddings, frame.classes)
            rec["exp"]["proprio"] = encode_window(window)
        log.records.append(rec)
        lap_ticks.append(rec)
        if on_tick is not None:
            on_tick(rec, pipe)
        if t + 1e-9 >= next_snapshot:
            name = on_snapshot(t, pipe) if on_snapshot is not None else None
            log.records.append({"type": "snapshot", "t": t, "name": name})
            next_snapshot += episode.snapshot_period

        state = new_state
        n += 1
        s_now = route.project(state.x, state.y, s_now)
        if s_now > best_s + episode.progress_eps:
            best_s = s_now
            last_progress = t
        if int((s_now - s0) // route.length) > lap:
            log.laps.append(_lap_metrics(lap, lap_ticks))
            lap_ticks = []
            lap += 1
            if lap >= episode.laps:
                break
    if lap_ticks and lap < episode.laps:
        log.laps.append(_lap_metrics(lap, lap_ticks))
    log.summary = {"type": "summary", "aborted": False, "t": n * episode.tick,
                   "laps_completed": lap, "refits": pipe.n_refits,
                   "interventions": sum(l["interventions"] for l in log.laps),
                   "lethal_ticks": sum(l["lethal_ticks"] for l in log.laps),
                   "buffer_size": len(pipe.buffer), "alpha_s": pipe.risk.alpha_s}
    log.pipeline = pipe
    return log


# ---------------------------------------------------------------------------
# offline replay

@dataclass
class ReplayResult:
    pipeline: TraversabilityPipeline
    errors: list  # (t, n_cells, mean |predicted cost - true cost|)
    ticks: int


def replay(log: EpisodeLog, clusters: ClusterSet, pipeline: PipelineConfig = PipelineConfig(),
           on_snapshot=None) -> ReplayResult:
    """Re-run perception and estimation over a recorded stream.

    Frames and vibration windows come from the log; planning and dynamics
    are skipped.  Ticks without a recorded frame or window skip that stage.
    Per tick the mean absolute cost error over cells with ground-truth
    labels is recorded.
    """
    x0, y0 = log.header["start"][:2]
    pipe = TraversabilityPipeline(clusters, pipeline, x0, y0)
    for p in log.header.get("pins", []):
        pipe.pin(np.asarray(p["descriptor"], float), p["roughness"], p["speeds"], 0.0)
    classes = log.header.get("classes")
    errors = []
    ticks = 0
    for rec in log.records:
        if rec["type"] == "snapshot":
            if on_snapshot is not None:
                on_snapshot(rec["t"], pipe)
            continue
        ticks += 1
        t = rec["t"]
        if "obs" in rec:
            cells, emb, cls = decode_frame(rec["obs"])
            desc = vlad_descriptor(emb.astype(np.float64), clusters) if len(cells) \
                else np.zeros((0, clusters.k))
        else:
            cells, desc, cls = np.zeros((0, 2), np.int64), np.zeros((0, clusters.k)), None
        pipe.perceive(t, rec["x"], rec["y"], cells, desc, rec["speed"])
        if classes is not None and cls is not None and len(cells):
            gi, gj = pipe.grid.lattice_to_cell(cells[:, 0], cells[:, 1])
            keep = pipe.grid.in_bounds(gi, gj)
            pred = pipe.grid.cost[gi[keep], gj[keep]]
            ok = np.isfinite(pred)
            if ok.any():
                truth = true_cost(classes, cls[keep][ok], pipe.query_speed)
                errors.append((t, int(ok.sum()), float(np.mean(np.abs(pred[ok] - truth)))))
        e = rec.get("exp")
        if e is not None and "proprio" in e:
            pipe.experience(e["t"], e["x"], e["y"], e["speed"], decode_window(e["proprio"]))
    return ReplayResult(pipe, errors, ticks)


# ---------------------------------------------------------------------------
# speed exploration on a single terrain

@dataclass
class ExploreTrace:
    limits: list
    speeds: list
    roughness: list
    alpha_s: list


def explore_speed(world: World, clusters: ClusterSet, class_name: str, steps: int = 60,
                  pipeline: PipelineConfig = PipelineConfig(), seed: int = 0,
                  windows_per_step: int = 1) -> ExploreTrace:
    """Drive repeatedly over one terrain class at the current speed limit.

    Each step commands the risk-adjusted limit for that terrain's
    descriptor and records ``windows_per_step`` vibration windows at that
    speed.  Every window becomes a buffer sample and an ``alpha_s``
    update; the models are refitted once per step.  The trace holds the
    mean roughness of each step.
    """
    if windows_per_step < 1:
        raise InvalidInputError("windows_per_step must be >= 1")
    cid = world.spec.class_index(class_name)
    rng = np.random.default_rng([seed, 5])
    emb = world.embed(np.full(8, cid), rng).astype(np.float64)
    desc = vlad_descriptor(emb, clusters).mean(axis=0)
    buf = ExperienceBuffer(pipeline.buffer)
    risk = pipeline.risk
    model = None
    trace = ExploreTrace([], [], [], [])
    for _ in range(steps):
        lim = float(speed_limit(model, desc, risk.r_max, risk.alpha_s, pipeline.s_hard_max))
        s = lim
        r_true = float(world.true_roughness(cid, s))
        rs = []
        for _ in range(windows_per_step):
            w = synthesize_proprio(r_true, 1.0, 100.0, pipeline.roughness_params, rng, s)
            r = roughness(w, pipeline.roughness_params)
            risk = update_alpha_s(risk, s, lim, r)
            buf.add(desc, s, r, float(len(trace.limits) * windows_per_step + len(rs)))
            rs.append(r)
        trace.limits.append(lim)
        trace.speeds.append(s)
        trace.roughness.append(float(np.mean(rs)))
        trace.alpha_s.append(risk.alpha_s)
        model = fit_speed_model(buf.snapshot(), pipeline.speed_hyper, pipeline.scaling)
    return trace
