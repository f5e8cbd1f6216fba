"""Acceptance criteria 1 to 11.

Each test prints one ``[criterion N] PASS|FAIL`` line (visible without
``-s``) and then asserts the same condition, runtime budget included.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml

from adaptive_trav.bev_map import BevGrid, integrate, morphological_open
from adaptive_trav.cli import EXIT_OK, main
from adaptive_trav.estimator import (
    DEFAULT_SPEED_HYPER, GprHyper, InputScaling, RiskState, cvar_adjust, fit_cost_model, fit_gpr,
    fit_speed_model, gpr_predict, predict_grid, rasterize,
)
from adaptive_trav.errors import EpisodeAborted
from adaptive_trav.experience_buffer import BufferConfig, ExperienceBuffer, avg_pairwise_distance
from adaptive_trav.feature_space import fit_clusters, vlad_descriptor
from adaptive_trav.pipeline import PipelineConfig, TraversabilityPipeline
from adaptive_trav.planner import MppiParams, VehicleState, mppi_plan
from adaptive_trav.proprioception import BandIntegrator, bandpower
from adaptive_trav.sim import (
    EpisodeConfig, Pin, _class_table, class_descriptor, explore_speed, run_episode, true_cost,
)
from adaptive_trav.world import (
    DEFAULT_CLASSES, TerrainClass, WorldSpec, generate_world, sense, suggest_descriptor_scale,
)


def report(capsys, n: int, ok: bool, detail: str, elapsed: float, budget: float):
    ok = ok and elapsed < budget
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}  "
              f"({elapsed:.1f} s, budget {budget:g} s)")
    assert ok, detail


def _pipeline_for(clusters, **kw) -> PipelineConfig:
    return PipelineConfig(scaling=InputScaling(descriptor_scale=suggest_descriptor_scale(clusters)),
                          **kw)


# -- 1 --------------------------------------------------------------------

def _dense(X, y, Xq, h):
    d = lambda A, B: ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    k = lambda A, B: h.signal_var * np.exp(-d(A, B) / (2 * h.length_scale ** 2))
    A = k(X, X) + h.noise_var * np.eye(len(X))
    Ks = k(Xq, X)
    return Ks @ np.linalg.solve(A, y), h.signal_var - np.einsum("ij,ji->i", Ks, np.linalg.solve(A, Ks.T))


def test_gpr_oracle_equivalence(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        h = GprHyper(rng.uniform(0.1, 2.0), rng.uniform(0.3, 2.0), rng.uniform(1e-3, 1e-1))
        dim = int(rng.integers(2, 9))
        # two far-apart groups so the map path really splits into blocks
        X = rng.random((20, dim)) + np.repeat([[0.0], [20.0]], 10, axis=0)
        y = rng.standard_normal(20)
        Xq = rng.random((40, dim)) + np.repeat([[0.0], [20.0]], 20, axis=0)
        mo, vo = _dense(X, y, Xq, h)
        model = fit_gpr(X, y, h)
        m, v = gpr_predict(model, Xq)
        # the map path: last column is the conditioning input, shared by all queries
        mg, vg = predict_grid(model, Xq[:, :-1], 0.0)
        mq, vq = _dense(X, y, np.column_stack([Xq[:, :-1], np.zeros(40)]), h)
        worst = max(worst, *(np.abs(a - b).max() for a, b in
                             ((m, mo), (v, vo), (mg, mq), (vg, vq))))
    report(capsys, 1, worst <= 1e-8, f"max |gp - dense| = {worst:.2e} over 50 problems",
           time.perf_counter() - t0, 5)


# -- 2 --------------------------------------------------------------------

def test_cvar_matches_monte_carlo(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mu, v = 0.3, 0.04
    x = mu + math.sqrt(v) * rng.standard_normal(1_000_000)
    worst = 0.0
    for a in (0.5, 0.9, 0.95):
        tail = np.sort(x)[int(round(a * len(x))):].mean()
        worst = max(worst, abs(cvar_adjust(mu, v, a) - tail) / abs(tail))
    exact = cvar_adjust(mu, v, 0.0) == mu and cvar_adjust(-1.25, 9.0, 0.0) == -1.25
    report(capsys, 2, worst <= 0.01 and exact,
           f"max rel err {worst:.2e}, alpha=0 returns mu: {exact}", time.perf_counter() - t0, 10)


# -- 3 --------------------------------------------------------------------

def test_bandpower(capsys):
    t0 = time.perf_counter()
    fs = 100.0
    t = np.arange(200) / fs
    x = np.sin(2 * np.pi * 5.37 * t)  # off-bin, so Hann sidelobes do leak
    inband = bandpower(x, fs, 3.0, 7.0)
    leak = bandpower(x, fs, 20.0, 40.0)
    noise = np.random.default_rng(3).standard_normal(200)
    bi = BandIntegrator(noise, fs)
    split = abs(bi.power(1.3, 11.7) + bi.power(11.7, 37.1) - bi.power(1.3, 37.1))
    ok = abs(inband - 0.5) <= 0.025 and leak < 0.01 * 0.5 and split <= 1e-12 * bi.power(1.3, 37.1)
    report(capsys, 3, ok, f"tone {inband:.4f} (oracle 0.5), leakage {leak:.2e}, split residue "
           f"{split:.1e}", time.perf_counter() - t0, 1)


# -- 4 --------------------------------------------------------------------

def _stream(kind: str, centers, n: int = 2000, seed: int = 0):
    rng = np.random.default_rng(seed)
    k = len(centers)
    for t in range(n):
        if kind == "dominant":
            # one class at cruise speed, rare excursions elsewhere
            c = 0 if rng.random() < 0.9 else int(rng.integers(1, 4))
            s = 3.0 + 0.2 * rng.standard_normal() if c == 0 else rng.uniform(0, 8)
        elif kind == "regimes":
            c = min(t * 4 // n, 3)
            s = rng.uniform(1, 3) + c
        else:
            c = 0 if (t // 50) % 5 else int(rng.integers(1, 4))
            s = 4 + 3.5 * math.sin(t / 300)
        s = float(np.clip(s, 0, 8))
        e = centers[c] + rng.normal(0, 0.3, k)
        r = float(np.clip(0.05 * c + 0.02 * s + 0.01 * rng.standard_normal(), 0, 1))
        yield np.abs(centers - e).sum(1), s, r, float(t)


def test_buffer_strategy_direction(capsys):
    t0 = time.perf_counter()
    centers = np.random.default_rng(0).normal(0, 3, (8, 8))
    ratios = {}
    for kind in ("dominant", "regimes", "sweep"):
        apd = {}
        for strategy in ("class_speed", "fifo"):
            buf = ExperienceBuffer(BufferConfig(capacity=512, strategy=strategy))
            for d, s, r, t in _stream(kind, centers):
                buf.add(d, s, r, t)
            apd[strategy] = avg_pairwise_distance(buf.snapshot())
        ratios[kind] = apd["class_speed"] / apd["fifo"]
    ok = all(r >= 1.10 for r in ratios.values())
    report(capsys, 4, ok, "class-speed / fifo: " + ", ".join(f"{k} {v:.2f}" for k, v in ratios.items()),
           time.perf_counter() - t0, 30)


# -- 5 --------------------------------------------------------------------

def test_fast_adaptation_to_grass(capsys):
    t0 = time.perf_counter()
    spec = WorldSpec(seed=0, layout="uniform", fill_class="trail", size_m=(120.0, 40.0))
    world = generate_world(spec)
    gid = spec.class_index("smooth_grass")
    world.labels[80:, :] = gid  # grass from x = 40 m
    world.start = (5.0, 20.0, 0.0)
    world.waypoints = np.array([[115.0, 20.0], [115.0, 35.0], [5.0, 35.0], [5.0, 20.0]])
    clusters = fit_clusters(world.sample_embeddings(2000, 0), 16, 0)
    table = _class_table(world)
    driven, hist, first = set(), [], []

    def on_tick(rec, pipe):
        li, lj = (int(v) for v in world.lattice(rec["exp"]["x"], rec["exp"]["y"]))
        driven.update((li + a, lj + b) for a in range(-2, 3) for b in range(-2, 3))
        if rec["class"] == gid and not first:
            first.append(rec["t"])
        g = pipe.grid
        I, J = np.nonzero(g.known & np.isfinite(g.cost))
        LI, LJ = I + g.origin_cell[0], J + g.origin_cell[1]
        cls = world.class_at_lattice(LI, LJ)
        held_out = (cls == gid) & np.array([(a, b) not in driven for a, b in zip(LI, LJ)], bool)
        if first and held_out.any():
            err = np.abs(g.cost[I[held_out], J[held_out]]
                         - true_cost(table, cls[held_out], pipe.query_speed)).mean()
            hist.append((rec["t"], float(err)))

    run_episode(world, clusters, EpisodeConfig(seed=0, max_time=25.0), _pipeline_for(clusters),
                on_tick=on_tick)
    hit = [t for t, e in hist if e < 0.10]
    delay = hit[0] - first[0] if first and hit else math.inf
    last = hist[-1][1] if hist else math.nan
    report(capsys, 5, delay <= 10.0,
           f"grass first driven at {first[0] if first else math.nan:.1f} s, error < 0.10 after "
           f"{delay:.1f} s (final error {last:.3f})", time.perf_counter() - t0, 120)


# -- 6 --------------------------------------------------------------------

# terrain whose roughness rises steeply enough with speed for the budget to bind
STEEP = {"trail": (0.04, 0.04), "smooth_grass": (0.08, 0.05), "rough_grass": (0.15, 0.07),
         "gravel": (0.08, 0.06)}
STEEP_CLASSES = tuple(replace(c, r0=STEEP[c.name][0], r1=STEEP[c.name][1]) if c.name in STEEP
                      else c for c in DEFAULT_CLASSES)


def _lap(world, clusters, seed, r_max, pinned=True, laps=1, on_tick=None, **episode):
    pc = _pipeline_for(clusters, risk=RiskState(r_max=r_max))
    pins = [Pin(tuple(class_descriptor(world, clusters, "tree", pc, seed)))] if pinned else []
    return run_episode(world, clusters, EpisodeConfig(laps=laps, seed=seed, **episode), pc,
                       pins=pins, on_tick=on_tick)


@pytest.mark.slow
def test_risk_tolerance_ordering(capsys):
    t0 = time.perf_counter()
    rows, wins = [], 0
    for seed in range(5):
        world = generate_world(WorldSpec(seed=seed, classes=STEEP_CLASSES))
        clusters = fit_clusters(world.sample_embeddings(4000, seed), 32, seed)
        arms = {}
        for r_max in (0.2, 0.4):
            try:
                lap = _lap(world, clusters, seed, r_max).laps[0]
                arms[r_max] = (lap["avg_roughness"], lap["avg_speed"])
            except EpisodeAborted as e:
                arms[r_max] = None
                rows.append(f"seed {seed} R_max {r_max}: {e}")
        if arms[0.2] and arms[0.4]:
            won = arms[0.2][0] <= arms[0.4][0] and arms[0.2][1] <= arms[0.4][1]
            wins += won
            rows.append(f"seed {seed}: R {arms[0.2][0]:.3f}/{arms[0.4][0]:.3f} "
                        f"v {arms[0.2][1]:.2f}/{arms[0.4][1]:.2f} {'ok' if won else 'inverted'}")
    with capsys.disabled():
        print("\n  " + "\n  ".join(rows))
    report(capsys, 6, wins >= 4, f"{wins}/5 seeds ordered (R_max 0.2 vs 0.4)",
           time.perf_counter() - t0, 600)


# -- 7 --------------------------------------------------------------------

@pytest.mark.slow
def test_one_shot_tree_pin(capsys):
    t0 = time.perf_counter()
    world = generate_world(WorldSpec(seed=0))
    clusters = fit_clusters(world.sample_embeddings(4000, 0), 32, 0)
    tree = world.spec.class_index("tree")
    low = [np.inf]

    def watch_trees(rec, pipe):
        g = pipe.grid
        LI, LJ = np.meshgrid(np.arange(g.width) + g.origin_cell[0],
                             np.arange(g.height) + g.origin_cell[1], indexing="ij")
        cells = g.known & np.isfinite(g.cost) & (world.class_at_lattice(LI, LJ) == tree)
        if cells.any():
            low[0] = min(low[0], float(g.cost[cells].min()))

    pinned = _lap(world, clusters, 0, 0.3, laps=5, on_tick=watch_trees)
    lethal_pinned = pinned.summary["lethal_ticks"]

    class Hit(Exception):
        pass

    def stop_on_hit(rec, pipe):
        if rec["lethal"]:
            raise Hit

    try:
        bare = _lap(world, clusters, 0, 0.3, pinned=False, laps=5, on_tick=stop_on_hit)
        lethal_bare = bare.summary["lethal_ticks"]
    except Hit:
        lethal_bare = 1
    except EpisodeAborted:
        lethal_bare = 0
    ok = low[0] >= 0.9 and lethal_pinned == 0 and lethal_bare >= 1 and len(pinned.laps) == 5
    report(capsys, 7, ok, f"pinned, {len(pinned.laps)} laps: min tree cost {low[0]:.3f}, "
           f"lethal ticks {lethal_pinned}; "
           f"unpinned lethal ticks >= {lethal_bare}", time.perf_counter() - t0, 600)


# -- 8 --------------------------------------------------------------------

def test_ood_masking(capsys):
    t0 = time.perf_counter()
    world = generate_world(WorldSpec(seed=0))
    clusters = fit_clusters(world.sample_embeddings(4000, 0), 32, 0)
    fid = world.spec.class_index("foreign")
    patch = np.argwhere(world.labels == fid)
    cx, cy = (patch.mean(0) + 0.5) * world.resolution
    vx, vy = cx - 8.0, cy
    pipe = TraversabilityPipeline(clusters, _pipeline_for(clusters), vx, vy)
    rng = np.random.default_rng(8)
    for k in range(3):
        f = sense(world, (vx, vy, 0.0), clusters, rng)
        pipe.perceive(0.1 * k, vx, vy, f.cells, f.descriptors, 0.0)
    g = pipe.grid
    gi, gj = g.lattice_to_cell(patch[:, 0], patch[:, 1])
    flagged = g.ood[gi, gj] & (g.cost[gi, gj] == 1.0) & (g.speed_limit[gi, gj] == 0.0)
    inner = np.zeros(g.ood.shape, bool)
    inner[gi, gj] = True
    inner &= morphological_open(inner, 1)
    patch_ok = bool(flagged[inner[gi, gj]].all())

    # isolated false flags at a 1% rate, none touching each other or the patch
    mask = g.ood.copy()
    near = np.zeros_like(mask)
    near[1:-1, 1:-1] = True
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            near &= ~np.roll(np.roll(mask, di, 0), dj, 1)
    want = int(0.01 * mask.size)
    injected = np.zeros_like(mask)
    for i, j in rng.permutation(np.argwhere(near)):
        if injected.sum() >= want:
            break
        if not injected[i - 1:i + 2, j - 1:j + 2].any():
            injected[i, j] = True
    opened = morphological_open(mask | injected, 1)
    removed = not (opened & injected).any()
    interior_kept = np.array_equal(opened & inner, inner) and np.array_equal(opened, morphological_open(mask, 1))
    ok = patch_ok and removed and interior_kept and injected.sum() == want
    report(capsys, 8, ok, f"patch interior lethal: {patch_ok} ({int(inner.sum())} cells), "
           f"{int(injected.sum())} injected flags removed: {removed}, interior preserved: "
           f"{interior_kept}", time.perf_counter() - t0, 60)


# -- 9 --------------------------------------------------------------------

def test_adaptive_alpha_s(capsys):
    t0 = time.perf_counter()
    risk = RiskState()
    eps_v = risk.eps_v
    classes = DEFAULT_CLASSES + (TerrainClass("boulders", 0.45, 0.05),)
    notes, ok = [], True
    for seed in range(5):
        world = generate_world(WorldSpec(seed=seed, classes=classes))
        clusters = fit_clusters(world.sample_embeddings(2000, seed), 16, seed)
        pc = _pipeline_for(clusters)
        trail = world.classes[world.spec.class_index("trail")]
        assert trail.roughness(pc.s_hard_max) < risk.r_max - risk.eps_r
        # one step is one second of driving: ten 1 s windows at the 10 Hz tick
        tr = explore_speed(world, clusters, "trail", steps=30, pipeline=pc, seed=seed,
                           windows_per_step=10)
        L = np.array(tr.limits)
        top = pc.s_hard_max - eps_v
        reached = np.flatnonzero(L >= top)
        end = reached[0] if len(reached) else len(L) - 1
        mono = bool(np.all(np.diff(L[:end + 1]) >= 0.0)) and len(reached) > 0
        hard = explore_speed(world, clusters, "boulders", steps=20, pipeline=pc, seed=seed)
        to_min = np.flatnonzero(np.array(hard.alpha_s) <= risk.alpha_min)
        fast = len(to_min) > 0 and to_min[0] < 20
        ok &= mono and fast
        notes.append(f"seed {seed}: trail max after {end + 1} steps mono={mono}, "
                     f"boulders alpha_min after {to_min[0] + 1 if fast else '>20'} updates")
    with capsys.disabled():
        print("\n  " + "\n  ".join(notes))
    report(capsys, 9, ok, "limit non-decreasing to the top on easy terrain, alpha_S floored on "
           "hard terrain", time.perf_counter() - t0, 60)


# -- 10 -------------------------------------------------------------------

def test_determinism(capsys, tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({
        "clusters": {"k": 16, "n_samples": 1000}, "pins": [{"class": "tree"}],
        "episode": {"max_time": 6.0, "snapshot_period": 2.0, "record_stream": True}}))
    outs = []
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
        assert main(["export-maps", "--snapshot", str(tmp_path / name / "snapshots" / "final"),
                     "--out", str(tmp_path / name / "maps")]) == EXIT_OK
        root = tmp_path / name
        outs.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
                     if p.is_file()})
    same = outs[0] == outs[1]
    n_maps = sum(k.startswith("maps") for k in outs[0])
    report(capsys, 10, same and n_maps > 0 and "episode.jsonl" in outs[0],
           f"{len(outs[0])} files incl. episode log and {n_maps} map exports byte-identical: {same}",
           time.perf_counter() - t0, 120)


# -- 11 -------------------------------------------------------------------

def test_performance_budget(capsys):
    t0 = time.perf_counter()
    world = generate_world(WorldSpec(seed=0))
    clusters = fit_clusters(world.sample_embeddings(4000, 0), 32, 0)
    rng = np.random.default_rng(0)
    D = vlad_descriptor(world.embed(rng.integers(0, 4, 16400), rng).astype(float), clusters)
    buf = ExperienceBuffer(BufferConfig(capacity=512))
    for i in range(2000):
        buf.add(D[i], float(rng.uniform(0, 8)), float(rng.uniform(0, 0.5)), float(i))
    g = BevGrid.centered(clusters.k, 0.0, 0.0, width=120, height=120)
    idx = np.argwhere(np.ones((120, 120), bool))
    integrate(g, idx, D[2000:])
    sc = InputScaling(descriptor_scale=suggest_descriptor_scale(clusters))
    refit = []
    for _ in range(5):
        t = time.perf_counter()
        snap = buf.snapshot()
        cm = fit_cost_model(snap, scaling=sc)
        sm = fit_speed_model(snap, DEFAULT_SPEED_HYPER, sc)
        rasterize(g, cm, sm, RiskState(), 3.0)
        refit.append(time.perf_counter() - t)
    plan = []
    for s in range(10):
        t = time.perf_counter()
        mppi_plan(VehicleState(0.0, 0.0, 0.0, 3.0), g, (20.0, 5.0), MppiParams(), seed=s)
        plan.append(time.perf_counter() - t)
    r_ms, p_ms = 1e3 * np.median(refit), 1e3 * np.median(plan)
    assert len(buf) == 512 and np.isfinite(g.cost).all()
    report(capsys, 11, r_ms < 250 and p_ms < 50,
           f"refit + 120x120 raster {r_ms:.0f} ms (< 250), MPPI M=512 H=40 {p_ms:.1f} ms (< 50)",
           time.perf_counter() - t0, 60)
