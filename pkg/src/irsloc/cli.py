"""Command-line interface: experiment runner, CRB reports, angle pipeline.

Subcommands:
    run     execute a scenario preset and write CSV plus plot-data series
    crb     CRB report of a configured scene, per scheme
    angles  run the angle-estimation pipeline once on a configured scene

Thread count is controlled by the IRSLOC_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import bench
from .angles import estimate_all_angles
from .anm import AdmmOptions
from .config import default_scene, load_scene
from .crb import SCHEMES, SingularFimError, crb_csv_header, crb_csv_row, scheme_crb
from .delay import estimate_all_delays, extract_all_observations
from .geometry import geometry_params
from .streams import effective_signal, make_orthogonal_streams, synthesize_received


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irsloc",
        description="Multi-IRS collaborative hybrid localization simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario preset")
    run.add_argument("--scenario", required=True,
                     choices=[s for s in bench.SCENARIOS if s != "custom"])
    run.add_argument("--trials", type=int, default=100)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", type=Path, default=Path("results"))
    run.add_argument(
        "--scheme",
        default=None,
        help="comma-separated scheme/method subset (default: preset list)",
    )
    run.add_argument(
        "--full-pipeline",
        action="store_true",
        help="run waveform-level estimation where the preset supports it",
    )
    run.add_argument("--trace", action="store_true", help="write timing column")

    crb = sub.add_parser("crb", help="CRB report for a configured scene")
    crb.add_argument("--config", type=Path, default=None)
    crb.add_argument("--out", type=Path, default=Path("results"))
    crb.add_argument("--scheme", default=",".join(SCHEMES))

    ang = sub.add_parser("angles", help="angle estimation on a configured scene")
    ang.add_argument("--config", type=Path, default=None)
    ang.add_argument("--out", type=Path, default=Path("results"))
    ang.add_argument(
        "--trace",
        action="store_true",
        help="dump ADMM iteration diagnostics and matched-filter metrics",
    )
    ang.add_argument(
        "--model-observations",
        action="store_true",
        help="draw observations from the signal model instead of the waveform pipeline",
    )
    return parser


def _cmd_run(args) -> int:
    spec = bench.preset(args.scenario, n_trials=args.trials, seed=args.seed)
    if args.scheme:
        schemes = tuple(s.strip() for s in args.scheme.split(","))
        from dataclasses import replace

        spec = replace(spec, schemes=schemes)
    if args.full_pipeline:
        from dataclasses import replace

        spec = replace(spec, full_pipeline=True)
    rows = bench.run_experiment(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path = args.out / f"{args.scenario}.csv"
    bench.emit_csv(rows, csv_path, include_wall_time=args.trace)
    bench.emit_plotdata(rows, args.out / "plotdata")
    print(f"wrote {csv_path}")
    ok = _all_points_have_success(rows)
    return 0 if ok else 1


def _all_points_have_success(rows) -> bool:
    by_point: dict[tuple, bool] = {}
    for r in rows:
        key = (r.scenario, r.sweep_value)
        success = r.n_failed < r.n_trials and np.isfinite(r.value_linear)
        by_point[key] = by_point.get(key, False) or success
    return all(by_point.values())


def _cmd_crb(args) -> int:
    scene = load_scene(args.config) if args.config else default_scene()
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "crb.csv"
    schemes = [s.strip() for s in args.scheme.split(",")]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(crb_csv_header())
        for scheme in schemes:
            try:
                report = scheme_crb(scene, scheme)
                writer.writerow(
                    crb_csv_row(
                        scene,
                        scheme,
                        report.crb_location,
                        f"{scene.target_position[0]}/{scene.target_position[1]}",
                    )
                )
            except SingularFimError as err:
                print(f"{scheme}: singular FIM ({err})", file=sys.stderr)
    print(f"wrote {out_path}")
    return 0


def _cmd_angles(args) -> int:
    scene = load_scene(args.config) if args.config else bench.angle_test_scene()
    args.out.mkdir(parents=True, exist_ok=True)
    geometry = geometry_params(scene)
    whiten = args.model_observations
    streams = make_orthogonal_streams(scene, whiten_effective=whiten)

    if args.model_observations:
        rng = np.random.default_rng(scene.seed)
        observations = bench.draw_observations(scene, streams, geometry, rng)
    else:
        received = synthesize_received(scene, streams, geometry, fractional_delay=True)
        estimates = estimate_all_delays(
            scene, received, streams, geometry, refine="sinc", keep_metric=args.trace
        )
        if args.trace:
            _dump_metrics(estimates, args.out)
        signals = [effective_signal(scene, k, streams) for k in range(scene.n_irs)]
        observations = extract_all_observations(
            scene, received, streams, estimates, signals, geometry
        )

    opts = AdmmOptions(max_iter=1500)
    results = estimate_all_angles(observations, scene, opts, streams=streams)
    if args.trace:
        _dump_admm_trace(observations, args.out)
    out_path = args.out / "angles.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["irs", "theta_aoa", "theta_aod", "theta_fused", "theta_true",
             "w_aoa", "w_aod", "iterations", "status"]
        )
        for r in results:
            writer.writerow(
                [
                    r.irs,
                    _fmt(r.theta_aoa),
                    _fmt(r.theta_aod),
                    _fmt(r.theta_fused),
                    f"{geometry.angles[r.irs]:.9f}",
                    f"{r.weights[0]:.6f}",
                    f"{r.weights[1]:.6f}",
                    r.iterations,
                    r.status,
                ]
            )
    print(f"wrote {out_path}")
    return 0


def _fmt(value) -> str:
    return "" if value is None else f"{value:.9f}"


def _dump_admm_trace(observations, out_dir: Path) -> None:
    """Per-iteration diagnostics of the first AOA batch solve."""
    from .anm import admm_solve, preprocess_observation

    targets, kinds, weights = [], [], []
    scale = max(
        float(np.linalg.norm(o.matrix) / np.sqrt(o.matrix.size)) for o in observations[0]
    )
    for obs in observations[0]:
        t, kind = preprocess_observation(obs)
        targets.append(t / scale)
        kinds.append(kind)
        weights.append(obs.energy)
    result = admm_solve(targets, weights, kinds, AdmmOptions(max_iter=1500, trace_every=10))
    path = out_dir / "admm_trace.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "delta_x", "delta_z", "min_eig_z"])
        for row in result.trace or []:
            writer.writerow([row[0]] + [f"{v:.9e}" for v in row[1:]])


def _dump_metrics(delay_estimates, out_dir: Path) -> None:
    for row in delay_estimates:
        for est in row:
            if est.metric is None:
                continue
            l, k = est.pair
            path = out_dir / f"mf_metric_{l}_{k}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["lag_seconds", "metric"])
                for t, m in zip(est.lag_times, est.metric):
                    writer.writerow([f"{t:.12e}", f"{m:.9e}"])


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "crb":
        return _cmd_crb(args)
    return _cmd_angles(args)


if __name__ == "__main__":
    sys.exit(main())
