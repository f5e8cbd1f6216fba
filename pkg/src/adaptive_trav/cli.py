"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import bev_map
from .config import load_run_config, prepare
from .errors import EpisodeAborted, InvalidInputError
from .estimator import fit_cost_model, fit_speed_model, rasterize
from .feature_space import fit_clusters, load_embeddings, save_clusters
from .proprioception import fit_roughness_params, load_segments, save_params
from .sim import EpisodeLog, replay, run_episode
from .snapshot import load_snapshot, save_snapshot, snapshot_name

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _floats(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one number")
    return vals


def _fmt(v: float) -> str:
    return repr(float(v))


def cmd_fit_clusters(args) -> int:
    emb = load_embeddings(args.embeddings)
    clusters = fit_clusters(emb, args.k, args.seed, args.tau_percentile)
    save_clusters(clusters, args.out)
    print(f"wrote {clusters.k} centres (dim {clusters.dim}, tau {_fmt(clusters.tau)}) to {args.out}")
    return EXIT_OK


def cmd_fit_roughness(args) -> int:
    segments = load_segments(args.segments)
    fit = fit_roughness_params(segments, seed=args.seed, n_starts=args.starts)
    save_params(fit.params, args.out)
    print(f"loss {_fmt(fit.loss)}")
    return EXIT_OK


def _episode_outputs(log: EpisodeLog, out: Path) -> None:
    log.write(out / "episode.jsonl")
    (out / "metrics.csv").write_text(log.metrics_table())


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    if args.laps is not None:
        cfg.episode = dataclasses.replace(cfg.episode, laps=args.laps)
    if args.seed is not None:
        cfg.episode = dataclasses.replace(cfg.episode, seed=args.seed)
    out = Path(args.out) if args.out else cfg.output_dir
    if out is None:
        raise InvalidInputError("no output directory given (--out or output_dir in config)")
    setup = prepare(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_clusters(setup.clusters, out / "clusters.txt")
    snaps = out / "snapshots"

    def on_snapshot(t, pipe):
        name = snapshot_name(t)
        save_snapshot(pipe, snaps / name, t)
        return name

    try:
        log = run_episode(setup.world, setup.clusters, cfg.episode, setup.pipeline, cfg.planner,
                          cfg.vehicle, setup.pins, on_snapshot)
    except EpisodeAborted as exc:
        if exc.log is not None:
            _episode_outputs(exc.log, out)
        print(f"episode aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _episode_outputs(log, out)
    save_snapshot(log.pipeline, snaps / "final", log.ticks()[-1]["t"])
    print(log.metrics_table(), end="")
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = load_run_config(args.config)
    log, warnings = EpisodeLog.read(args.log)
    setup = prepare(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snaps = out / "snapshots"

    def on_snapshot(t, pipe):
        save_snapshot(pipe, snaps / snapshot_name(t), t)

    res = replay(log, setup.clusters, setup.pipeline, on_snapshot)
    with open(out / "errors.csv", "w") as fh:
        fh.write("t,n_cells,mean_abs_cost_error\n")
        for t, n, e in res.errors:
            fh.write(f"{_fmt(t)},{n},{_fmt(e)}\n")
    last_t = log.ticks()[-1]["t"] if log.ticks() else 0.0
    save_snapshot(res.pipeline, snaps / "final", last_t)
    if warnings:
        print(f"warning: {warnings} unreadable record(s); stopped at the last complete one",
              file=sys.stderr)
    print(f"replayed {res.ticks} ticks")
    return EXIT_OK


def _tag(v: float) -> str:
    return repr(float(v)).replace("-", "m")


def cmd_export_maps(args) -> int:
    snap = load_snapshot(args.snapshot)
    samples = snap.buffer.snapshot()
    if not samples:
        raise InvalidInputError(f"{args.snapshot}: snapshot buffer is empty")
    if not 0 <= args.alpha < 1:
        raise InvalidInputError("--alpha must lie in [0, 1)")
    cost_model = fit_cost_model(samples, snap.cost_hyper, snap.scaling)
    speed_model = fit_speed_model(samples, snap.speed_hyper, snap.scaling)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in args.speed:
        g = snap.grid.snapshot()
        g.clear_rasters()
        risk = dataclasses.replace(snap.risk, alpha_r=args.alpha)
        rasterize(g, cost_model, None, risk, v, snap.s_hard_max)
        bev_map.write_layer_csv(out / f"cost_speed_{_tag(v)}.csv", g.cost)
    for r in args.rmax:
        g = snap.grid.snapshot()
        g.clear_rasters()
        risk = dataclasses.replace(snap.risk, r_max=r, alpha_s=args.alpha,
                                   alpha_min=min(snap.risk.alpha_min, args.alpha),
                                   alpha_max=max(snap.risk.alpha_max, args.alpha))
        rasterize(g, None, speed_model, risk, 0.0, snap.s_hard_max)
        bev_map.write_layer_csv(out / f"speed_rmax_{_tag(r)}.csv", g.speed_limit)
    print(f"wrote {len(args.speed)} cost and {len(args.rmax)} speed layers to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptive-trav",
                                description="Online self-supervised traversability mapping.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-clusters", help="fit feature clusters to an embedding file")
    s.add_argument("--embeddings", required=True, help=".npy or whitespace text, one embedding per row")
    s.add_argument("--k", type=int, default=32, help="number of clusters")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tau-percentile", type=float, default=95.0,
                   help="percentile of nearest-center L1 distances used as the OOD threshold")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_clusters)

    s = sub.add_parser("fit-roughness", help="fit roughness band/weight parameters")
    s.add_argument("--segments", required=True, help="JSONL of scored vibration windows")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--starts", type=int, default=64, help="random starts before refinement")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_roughness)

    s = sub.add_parser("simulate", help="run a closed-loop episode")
    s.add_argument("--config", required=True, help="run configuration (YAML)")
    s.add_argument("--laps", type=int, help="override episode.laps")
    s.add_argument("--seed", type=int, help="override episode.seed")
    s.add_argument("--out", help="output directory (default: output_dir from the config)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("replay", help="re-run perception over a recorded episode log")
    s.add_argument("--log", required=True, help="episode.jsonl recorded with record_stream")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("export-maps", help="cost/speed layers for a sweep of conditions")
    s.add_argument("--snapshot", required=True, help="snapshot directory written by simulate or replay")
    s.add_argument("--speed", type=_floats, default=[2.0, 4.0, 6.0],
                   help="comma-separated query speeds for cost layers (m/s)")
    s.add_argument("--rmax", type=_floats, default=[0.1, 0.3, 0.5],
                   help="comma-separated roughness budgets for speed layers")
    s.add_argument("--alpha", type=float, default=0.0, help="CVaR level for both layers, in [0, 1)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_maps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
