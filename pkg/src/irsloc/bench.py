"""Seeded Monte Carlo experiment runner with scenario presets and CSV output.

Scenario presets mirror the reference performance studies at desk scale:
fig3/fig4 sweep array sizes for the scheme CRB comparison, fig5 sweeps the
coverage radius around the first IRS, fig6 runs the angle estimator against
its CRB over transmit power, fig7/fig8 compare the localization methods.
Per-trial seeds derive from (master seed, sweep index, trial index), so
results are independent of execution order and thread count.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .angles import estimate_all_angles
from .anm import AdmmOptions
from .channels import los_path
from .crb import (
    Disc,
    Rectangle,
    Region,
    SCHEMES,
    SingularFimError,
    fim_angles,
    fim_delay,
    scheme_crb,
    trial_scene,
)
from .delay import CascadeObservation
from .geometry import geometry_params, steering_vector
from .locate import METHODS, HybridMeasurements, localize
from .scene import SceneConfig, dbm_to_watts, make_scene, with_seed, with_target
from .streams import effective_signal, make_orthogonal_streams, synthesize_received

SCENARIOS = ("fig3", "fig4", "fig5", "fig6", "fig7", "fig8", "custom")

CSV_HEADER = [
    "scenario",
    "sweep_var",
    "sweep_value",
    "scheme",
    "metric",
    "value_linear",
    "value_db",
    "n_trials",
    "n_failed",
]


class PresetNotFoundError(KeyError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str
    sweep_var: str
    sweep_values: tuple
    schemes: tuple[str, ...]
    n_trials: int = 100
    seed: int = 0
    scene_template: Optional[SceneConfig] = None
    region: Optional[Region] = None
    full_pipeline: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise PresetNotFoundError(f"unknown scenario {self.scenario!r}")
        if len(self.sweep_values) == 0:
            raise ValueError("sweep grid must be nonempty")
        diffs = np.diff(np.asarray(self.sweep_values, dtype=float))
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("sweep grid must be strictly monotone")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    sweep_var: str
    sweep_value: float
    scheme: str
    metric: str
    value_linear: float
    n_trials: int
    n_failed: int
    wall_time_s: float

    @property
    def value_db(self) -> float:
        return 10.0 * np.log10(self.value_linear)


def trial_rng(seed: int, sweep_index: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, sweep_index, trial)))


def draw_measurements(
    scene: SceneConfig,
    rng: np.random.Generator,
    streams=None,
    geometry=None,
) -> HybridMeasurements:
    """Truth plus Gaussian noise at the CRB of each measurement.

    Cascade delays perturb with the delay-CRB variances, fused bearings
    with the combined AOA+AOD CRB; the same covariances are handed to the
    localization stages as their weighting matrices.
    """
    if geometry is None:
        geometry = geometry_params(scene)
    if streams is None:
        streams = make_orthogonal_streams(scene)
    fd = fim_delay(scene, streams, geometry)
    fa, fo = fim_angles(scene, streams, geometry)
    var_tau = 1.0 / np.diag(fd.matrix)
    var_theta = 1.0 / (np.diag(fa.matrix) + np.diag(fo.matrix))
    tau = geometry.cascade_delays.reshape(-1) + rng.standard_normal(var_tau.shape) * np.sqrt(
        var_tau
    )
    theta = geometry.angles + rng.standard_normal(var_theta.shape) * np.sqrt(var_theta)
    return HybridMeasurements(
        tau_hat=tau,
        theta_hat=theta,
        cov_tau=np.diag(var_tau),
        cov_theta=np.diag(var_theta),
        aod_available=np.ones(scene.n_irs, dtype=bool),
    )


def draw_observations(
    scene: SceneConfig,
    streams,
    geometry,
    rng: np.random.Generator,
    effective_signals=None,
) -> list[list[CascadeObservation]]:
    """Post-matched-filter observation matrices drawn from the signal model.

    R_{l,k} = alpha_{l,k} a(theta_l, M) a^H(theta_k, N) S_k plus white
    noise of per-entry variance sigma^2 (the matched filter of unit-norm
    orthonormal stream rows leaves the noise white).
    """
    n_irs = scene.n_irs
    if effective_signals is None:
        effective_signals = [effective_signal(scene, k, streams) for k in range(n_irs)]
    spacing = scene.element_spacing_ratio
    out = []
    for l in range(n_irs):
        m_l = scene.irs[l].n_sensors
        a_l = steering_vector(geometry.angles[l], m_l, spacing)
        row = []
        for k in range(n_irs):
            sig, cls = effective_signals[k]
            a_k = steering_vector(geometry.angles[k], scene.irs[k].n_elements, spacing)
            clean = geometry.cascade_gains[l, k] * np.outer(a_l, a_k.conj()) @ sig
            noise = np.sqrt(scene.noise_power / 2.0) * (
                rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)
            )
            r = clean + noise
            row.append(
                CascadeObservation(
                    pair=(l, k),
                    matrix=r,
                    effective_signal=sig,
                    rank_class=cls,
                    energy=float(np.linalg.norm(r) ** 2),
                )
            )
        out.append(row)
    return out


def rich_scattering_multipath(
    scene: SceneConfig, n_paths: int, seed: int
) -> tuple[tuple, ...]:
    """LoS plus scattered paths per IRS, gains at the LoS scale.

    With n_paths well above N the BS channels approach rich scattering and
    the effective signals become full rank and well conditioned.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5CA7)))
    out = []
    for k in range(scene.n_irs):
        los = los_path(scene, k)
        paths = [los]
        for _ in range(n_paths - 1):
            gain = abs(los[0]) * (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
            paths.append(
                (complex(gain), float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.5, 1.5)))
            )
        out.append(tuple(paths))
    return tuple(out)


def angle_test_scene(
    seed: int = 0,
    tx_power_dbm: float = 50.0,
    n_paths: int = 100,
    stream_rank: int = 30,
) -> SceneConfig:
    """Full-rank angle-estimation scene: rich scattering, whitening-ready.

    A tighter IRS ring than the CRB studies keeps the echoes above the
    estimator's threshold at 50 dBm transmit power.
    """
    base = make_scene(
        irs_positions=((8.0, 16.0), (8.0, -14.0), (22.0, 3.0)),
        target_position=(4.0, 5.0),
        seed=seed,
        stream_rank=stream_rank,
        tx_power=dbm_to_watts(tx_power_dbm),
    )
    return replace(base, bs_multipath=rich_scattering_multipath(base, n_paths, seed))


def _thread_count() -> int:
    value = os.environ.get("IRSLOC_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def _run_trials(fn: Callable[[int], dict], n_trials: int) -> list[dict]:
    """Execute trials concurrently, collecting results in trial order."""
    workers = _thread_count()
    if workers == 1:
        return [fn(t) for t in range(n_trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_trials)))


def _aggregate(
    scenario, sweep_var, sweep_value, per_trial: list[dict], metric: str, elapsed: float
) -> list[ResultRow]:
    """Mean per scheme over successful trials, failures counted."""
    schemes = sorted({key for trial in per_trial for key in trial})
    rows = []
    for scheme in schemes:
        values = [trial[scheme] for trial in per_trial if scheme in trial and trial[scheme] is not None]
        failed = sum(1 for trial in per_trial if trial.get(scheme) is None)
        mean = float(np.mean(values)) if values else float("nan")
        rows.append(
            ResultRow(
                scenario=scenario,
                sweep_var=sweep_var,
                sweep_value=float(sweep_value),
                scheme=scheme,
                metric=metric,
                value_linear=mean,
                n_trials=len(per_trial),
                n_failed=failed,
                wall_time_s=elapsed,
            )
        )
    return rows


DEFAULT_REGION = Rectangle(0.0, 10.0, 0.0, 10.0)


def preset(scenario: str, n_trials: int = 100, seed: int = 0, **overrides) -> ExperimentSpec:
    """Build the ExperimentSpec of a named scenario preset."""
    if scenario == "fig3":
        spec = ExperimentSpec(
            scenario="fig3",
            sweep_var="n_elements",
            sweep_values=(8, 16, 32, 64),
            schemes=SCHEMES,
            n_trials=n_trials,
            seed=seed,
            region=DEFAULT_REGION,
        )
    elif scenario == "fig4":
        spec = ExperimentSpec(
            scenario="fig4",
            sweep_var="n_sensors",
            sweep_values=(8, 16, 32, 64),
            schemes=SCHEMES,
            n_trials=n_trials,
            seed=seed,
            region=DEFAULT_REGION,
        )
    elif scenario == "fig5":
        spec = ExperimentSpec(
            scenario="fig5",
            sweep_var="radius",
            sweep_values=(10, 20, 30, 40, 50, 60),
            schemes=("collaborative-hybrid", "single-irs"),
            n_trials=n_trials,
            seed=seed,
        )
    elif scenario == "fig6":
        spec = ExperimentSpec(
            scenario="fig6",
            sweep_var="tx_power_dbm",
            sweep_values=(45.0, 50.0, 55.0),
            schemes=("anm-joint", "crb"),
            n_trials=n_trials,
            seed=seed,
        )
    elif scenario == "fig7":
        spec = ExperimentSpec(
            scenario="fig7",
            sweep_var="tx_power_dbm",
            sweep_values=(40.0, 45.0, 50.0, 55.0),
            schemes=METHODS + ("crb",),
            n_trials=n_trials,
            seed=seed,
            region=DEFAULT_REGION,
        )
    elif scenario == "fig8":
        spec = ExperimentSpec(
            scenario="fig8",
            sweep_var="irs_abscissa",
            sweep_values=(5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0),
            schemes=METHODS + ("crb",),
            n_trials=n_trials,
            seed=seed,
            region=DEFAULT_REGION,
        )
    else:
        raise PresetNotFoundError(f"no preset named {scenario!r}")
    if overrides:
        spec = replace(spec, **overrides)
    return spec


def run_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    """Execute a sweep: per point, Monte Carlo trials over the target region.

    Per-trial estimator failures are counted and never abort the sweep.
    """
    template = spec.scene_template or make_scene(seed=spec.seed)
    rows: list[ResultRow] = []
    for sweep_index, value in enumerate(spec.sweep_values):
        start = time.perf_counter()
        before = len(rows)
        if spec.scenario in ("fig3", "fig4", "custom"):
            rows += _crb_sweep_point(spec, template, sweep_index, value)
        elif spec.scenario == "fig5":
            rows += _radius_sweep_point(spec, template, sweep_index, value)
        elif spec.scenario == "fig6":
            rows += _angle_sweep_point(spec, sweep_index, value)
        else:  # fig7 / fig8
            rows += _localization_sweep_point(spec, template, sweep_index, value)
        elapsed = time.perf_counter() - start
        rows[before:] = [replace(r, wall_time_s=elapsed) for r in rows[before:]]
    return rows


def _sized_template(template: SceneConfig, sweep_var: str, value) -> SceneConfig:
    if sweep_var == "n_elements":
        return make_scene(
            irs_positions=[i.position for i in template.irs],
            target_position=template.target_position,
            seed=template.seed,
            n_elements=int(value),
            n_sensors=template.irs[0].n_sensors,
        )
    if sweep_var == "n_sensors":
        return make_scene(
            irs_positions=[i.position for i in template.irs],
            target_position=template.target_position,
            seed=template.seed,
            n_elements=template.irs[0].n_elements,
            n_sensors=int(value),
        )
    raise ValueError(f"unsupported sweep variable {sweep_var}")


def _crb_sweep_point(spec, template, sweep_index, value) -> list[ResultRow]:
    sized = _sized_template(template, spec.sweep_var, value)
    region = spec.region or DEFAULT_REGION

    def one_trial(t: int) -> dict:
        scene = trial_scene(sized, region, (spec.seed, sweep_index), t)
        out = {}
        for scheme in spec.schemes:
            try:
                out[scheme] = scheme_crb(scene, scheme).crb_location
            except SingularFimError:
                out[scheme] = None
        return out

    per_trial = _run_trials(one_trial, spec.n_trials)
    return _aggregate(spec.scenario, spec.sweep_var, value, per_trial, "crb_location", 0.0)


def _radius_sweep_point(spec, template, sweep_index, value) -> list[ResultRow]:
    disc = Disc(template.irs[0].position, float(value))

    def one_trial(t: int) -> dict:
        scene = trial_scene(template, disc, (spec.seed, sweep_index), t)
        out = {}
        for scheme in spec.schemes:
            try:
                out[scheme] = scheme_crb(scene, scheme).crb_location
            except SingularFimError:
                out[scheme] = None
        return out

    per_trial = _run_trials(one_trial, spec.n_trials)
    return _aggregate(spec.scenario, spec.sweep_var, value, per_trial, "crb_location", 0.0)


def _angle_sweep_point(spec, sweep_index, value) -> list[ResultRow]:
    stream_rank = 16 if spec.full_pipeline else 30
    base = angle_test_scene(
        seed=spec.seed, tx_power_dbm=float(value), stream_rank=stream_rank
    )

    def one_trial(t: int) -> dict:
        scene = with_seed(base, _derive(spec.seed, sweep_index, t))
        scene = replace(scene, bs_multipath=base.bs_multipath)
        geometry = geometry_params(scene)
        streams = make_orthogonal_streams(scene, whiten_effective=True)
        fa, fo = fim_angles(scene, streams, geometry)
        crb = float(np.mean(1.0 / (np.diag(fa.matrix) + np.diag(fo.matrix))))
        try:
            if spec.full_pipeline:
                from .delay import estimate_all_delays, extract_all_observations

                received = synthesize_received(scene, streams, geometry, fractional_delay=True)
                delay_ests = estimate_all_delays(
                    scene, received, streams, geometry, refine="sinc"
                )
                signals = [effective_signal(scene, k, streams) for k in range(scene.n_irs)]
                obs = extract_all_observations(
                    scene, received, streams, delay_ests, signals, geometry
                )
            else:
                rng = trial_rng(spec.seed, sweep_index, t)
                obs = draw_observations(scene, streams, geometry, rng)
            estimates = estimate_all_angles(
                obs, scene, AdmmOptions(max_iter=800), streams=streams
            )
            sq = [
                (est.theta_fused - geometry.angles[est.irs]) ** 2
                for est in estimates
                if est.theta_fused is not None
            ]
            mse = float(np.mean(sq)) if sq else None
        except Exception:
            mse = None
        return {"anm-joint": mse, "crb": crb}

    per_trial = _run_trials(one_trial, spec.n_trials)
    return _aggregate(spec.scenario, spec.sweep_var, value, per_trial, "mse_angle", 0.0)


def pipeline_measurements(scene: SceneConfig, streams=None, geometry=None) -> HybridMeasurements:
    """End-to-end waveform estimation: matched-filter delays, ANM angles.

    Covariances are populated from the Fisher information of the scene, the
    default weighting source for the localization stages.  Needs echoes
    above the matched-filter threshold; the CRB-noise generator is the
    desk-scale default.
    """
    from .angles import estimate_all_angles
    from .delay import estimate_all_delays, extract_all_observations

    if geometry is None:
        geometry = geometry_params(scene)
    if streams is None:
        streams = make_orthogonal_streams(scene)
    received = synthesize_received(scene, streams, geometry, fractional_delay=True)
    estimates = estimate_all_delays(scene, received, streams, geometry, refine="sinc")
    signals = [effective_signal(scene, k, streams) for k in range(scene.n_irs)]
    observations = extract_all_observations(
        scene, received, streams, estimates, signals, geometry
    )
    angle_estimates = estimate_all_angles(
        observations, scene, AdmmOptions(max_iter=800), streams=streams
    )
    fd = fim_delay(scene, streams, geometry)
    fa, fo = fim_angles(scene, streams, geometry)
    tau_hat = np.array([estimates[l][k].tau_hat for l in range(scene.n_irs) for k in range(scene.n_irs)])
    theta_hat = np.array(
        [e.theta_fused if e.theta_fused is not None else np.nan for e in angle_estimates]
    )
    aod = np.array([e.theta_aod is not None for e in angle_estimates])
    return HybridMeasurements(
        tau_hat=tau_hat,
        theta_hat=theta_hat,
        cov_tau=np.diag(1.0 / np.diag(fd.matrix)),
        cov_theta=np.diag(1.0 / (np.diag(fa.matrix) + np.diag(fo.matrix))),
        aod_available=aod,
    )


def _localization_sweep_point(spec, template, sweep_index, value) -> list[ResultRow]:
    region = spec.region or DEFAULT_REGION
    if spec.scenario == "fig7":
        sized = replace(template, tx_power=dbm_to_watts(float(value)))
    else:  # fig8: first two IRS abscissae move to d
        positions = [i.position for i in template.irs]
        positions[0] = (float(value), positions[0][1])
        positions[1] = (float(value), positions[1][1])
        sized = make_scene(
            irs_positions=positions,
            target_position=template.target_position,
            seed=template.seed,
            n_elements=template.irs[0].n_elements,
            n_sensors=template.irs[0].n_sensors,
        )

    methods = [s for s in spec.schemes if s in METHODS]

    def one_trial(t: int) -> dict:
        scene = trial_scene(sized, region, (spec.seed, sweep_index), t)
        geometry = geometry_params(scene)
        target = np.asarray(scene.target_position)
        out = {}
        try:
            if spec.full_pipeline:
                measurements = pipeline_measurements(scene, geometry=geometry)
            else:
                measurements = draw_measurements(
                    scene, trial_rng(spec.seed, sweep_index, t), geometry=geometry
                )
        except (SingularFimError, ValueError, RuntimeError):
            return {m: None for m in methods} | {"crb": None}
        if "crb" in spec.schemes:
            try:
                out["crb"] = scheme_crb(scene).crb_location
            except SingularFimError:
                out["crb"] = None
        pos = np.array([i.position for i in scene.irs])
        for method in methods:
            try:
                est = localize(measurements, pos, method)
                out[method] = float(np.sum((est.position - target) ** 2))
            except Exception:
                out[method] = None
        return out

    per_trial = _run_trials(one_trial, spec.n_trials)
    return _aggregate(spec.scenario, spec.sweep_var, value, per_trial, "mse_location", 0.0)


def _derive(seed, sweep_index, trial) -> int:
    return int(np.random.SeedSequence((seed, sweep_index, trial)).generate_state(1)[0])


def emit_csv(rows: Sequence[ResultRow], path, include_wall_time: bool = False) -> None:
    """Write rows as RFC-4180 CSV with a fixed header, deterministic order.

    Wall time is excluded by default so identical specs produce
    byte-identical files; pass include_wall_time for profiling output.
    """
    path = Path(path)
    ordered = sorted(rows, key=lambda r: (r.scenario, r.sweep_value, r.scheme, r.metric))
    header = CSV_HEADER + (["wall_time_s"] if include_wall_time else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in ordered:
            row = [
                r.scenario,
                r.sweep_var,
                f"{r.sweep_value:.17g}",
                r.scheme,
                r.metric,
                f"{r.value_linear:.17g}",
                f"{r.value_db:.9f}",
                r.n_trials,
                r.n_failed,
            ]
            if include_wall_time:
                row.append(f"{r.wall_time_s:.3f}")
            writer.writerow(row)


def parse_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                ResultRow(
                    scenario=rec["scenario"],
                    sweep_var=rec["sweep_var"],
                    sweep_value=float(rec["sweep_value"]),
                    scheme=rec["scheme"],
                    metric=rec["metric"],
                    value_linear=float(rec["value_linear"]),
                    n_trials=int(rec["n_trials"]),
                    n_failed=int(rec["n_failed"]),
                    wall_time_s=float(rec.get("wall_time_s", 0.0) or 0.0),
                )
            )
    return rows


AXIS_LABELS = {
    "n_elements": "reflective elements per IRS",
    "n_sensors": "sensors per IRS",
    "radius": "coverage radius [m]",
    "tx_power_dbm": "BS transmit power [dBm]",
    "irs_abscissa": "IRS abscissa d [m]",
}

METRIC_LABELS = {
    "crb_location": "location CRB [dB m^2]",
    "mse_location": "location MSE [dB m^2]",
    "mse_angle": "angle MSE [dB rad^2]",
}


def emit_plotdata(rows: Sequence[ResultRow], out_dir) -> list[Path]:
    """One whitespace-delimited (sweep value, dB) series per (scenario, scheme).

    A manifest.json lists every emitted series with axis labels and the
    figure tag it mirrors.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.scenario, r.scheme, r.metric), []).append(r)
    manifest = {"series": []}
    written = []
    for (scenario, scheme, metric), series in sorted(groups.items()):
        series = sorted(series, key=lambda r: r.sweep_value)
        fname = f"{scenario}_{scheme.replace('-', '_')}.dat"
        fpath = out_dir / fname
        with open(fpath, "w", encoding="utf-8") as fh:
            for r in series:
                fh.write(f"{r.sweep_value:.10g} {r.value_db:.9f}\n")
        manifest["series"].append(
            {
                "file": fname,
                "figure": scenario,
                "scheme": scheme,
                "metric": metric,
                "xlabel": AXIS_LABELS.get(series[0].sweep_var, series[0].sweep_var),
                "ylabel": METRIC_LABELS.get(metric, metric),
            }
        )
        written.append(fpath)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return written
