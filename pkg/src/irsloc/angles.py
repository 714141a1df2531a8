"""Per-IRS joint AOA/AOD estimation pipeline and Fisher-weighted fusion.

For IRS i the AOA batch joins the K observations {R_{i,k}} (shared receive
steering), dispatching each to its rank class; the AOD side depends on the
rank of the IRS's own effective signal S_i: full rank mirrors the AOA
solve with the roles of the two arrays exchanged, intermediate rank runs
the trust-region fit per observation, and rank one leaves the AOD
unavailable.  The far-field assumption makes both angles estimates of the
same bearing, so they fuse by Fisher weighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .anm import (
    AdmmConvergenceError,
    AdmmOptions,
    AdmmResult,
    BlockKind,
    admm_solve,
    angle_from_toeplitz,
    preprocess_observation,
)
from .crb import fim_angles
from .delay import CascadeObservation
from .geometry import steering_vector
from .scene import SceneConfig
from .streams import RankClass, SensingStreams, make_orthogonal_streams
from .trustregion import DegenerateFitError, TrustRegionError, trust_region_aod


@dataclass(frozen=True)
class AnglePairEstimate:
    irs: int
    theta_aoa: Optional[float]
    theta_aod: Optional[float]  # None when S_i has rank one (or AOD failed)
    theta_fused: Optional[float]
    weights: tuple[float, float]  # (w_aoa, w_aod), sum to 1
    iterations: int
    final_residual: float
    low_confidence: bool
    status: str  # "ok" or a short failure description


def fuse_angles(
    theta_aoa: Optional[float],
    theta_aod: Optional[float],
    fim_aoa: float,
    fim_aod: float,
) -> tuple[Optional[float], tuple[float, float]]:
    """Fisher-weighted combination of the two bearing estimates.

    Weights are proportional to each component's Fisher information; a
    missing component passes the other through with weight one.
    """
    if theta_aoa is None and theta_aod is None:
        return None, (0.0, 0.0)
    if theta_aod is None:
        return theta_aoa, (1.0, 0.0)
    if theta_aoa is None:
        return theta_aod, (0.0, 1.0)
    total = fim_aoa + fim_aod
    if total <= 0:
        w = (0.5, 0.5)
    else:
        w = (fim_aoa / total, fim_aod / total)
    return w[0] * theta_aoa + w[1] * theta_aod, w


def _batch_targets(observations: Sequence[CascadeObservation], scale: float):
    targets, kinds, weights = [], [], []
    for obs in observations:
        t, kind = preprocess_observation(obs)
        targets.append(t / scale)
        kinds.append(kind)
        weights.append(obs.energy)
    return targets, kinds, weights


def _solve_batch(targets, kinds, weights, opts) -> AdmmResult:
    try:
        result = admm_solve(targets, weights, kinds, opts)
    except AdmmConvergenceError as err:  # pragma: no cover - solve() never raises
        result = err.result
    return result


def estimate_all_angles(
    observations: Sequence[Sequence[CascadeObservation]],
    scene: SceneConfig,
    opts: Optional[AdmmOptions] = None,
    streams: Optional[SensingStreams] = None,
) -> list[AnglePairEstimate]:
    """Joint angle estimation over the full K x K observation set.

    observations[l][k] is the matched-filter output of IRS l against stream
    k.  Returns one fused estimate per IRS; failures are reported in the
    per-IRS status instead of aborting the batch.
    """
    n_irs = scene.n_irs
    opts = opts or AdmmOptions()
    if streams is None:
        streams = make_orthogonal_streams(scene)
    fa_aoa, fa_aod = fim_angles(scene, streams)
    info_aoa = np.diag(fa_aoa.matrix)
    info_aod = np.diag(fa_aod.matrix)

    # Common scale keeps the ADMM stopping thresholds meaningful for
    # physically tiny echo amplitudes.
    scale = max(
        float(np.linalg.norm(observations[l][k].matrix) / np.sqrt(observations[l][k].matrix.size))
        for l in range(n_irs)
        for k in range(n_irs)
    )
    if scale <= 0 or not np.isfinite(scale):
        scale = 1.0

    # Phase 1: AOA of every IRS (needed before any trust-region collapse).
    aoa_theta: list[Optional[float]] = [None] * n_irs
    aoa_iters = [0] * n_irs
    aoa_residual = [np.inf] * n_irs
    aoa_lowconf = [False] * n_irs
    statuses: list[list[str]] = [[] for _ in range(n_irs)]
    for i in range(n_irs):
        try:
            targets, kinds, weights = _batch_targets(observations[i], scale)
            result = _solve_batch(targets, kinds, weights, opts)
            aoa_iters[i] = result.iterations
            aoa_residual[i] = result.primal_residual
            aoa_theta[i], aoa_lowconf[i] = angle_from_toeplitz(
                result.v, scene.irs[i].n_sensors, scene.element_spacing_ratio
            )
            if not result.converged:
                statuses[i].append("aoa max_iter")
        except (ValueError, np.linalg.LinAlgError) as err:
            statuses[i].append(f"aoa failed: {err}")

    # Phase 2: AOD per IRS, dispatched on the rank class of its S_i.
    estimates = []
    for i in range(n_irs):
        theta_aod = None
        low_conf = aoa_lowconf[i]
        iterations = aoa_iters[i]
        residual = aoa_residual[i]
        aod_obs = [observations[l][i] for l in range(n_irs)]
        rank_class = aod_obs[0].rank_class
        if rank_class is RankClass.FULL:
            try:
                targets, _, weights = _batch_targets(aod_obs, scale)
                mirrored = [t.conj().T for t in targets]
                kinds = [BlockKind.TOEPLITZ] * len(mirrored)
                result = _solve_batch(mirrored, kinds, weights, opts)
                iterations = max(iterations, result.iterations)
                residual = min(residual, result.primal_residual)
                theta_aod, low2 = angle_from_toeplitz(
                    result.v, scene.irs[i].n_elements, scene.element_spacing_ratio
                )
                low_conf = low_conf or low2
                if not result.converged:
                    statuses[i].append("aod max_iter")
            except (ValueError, np.linalg.LinAlgError) as err:
                statuses[i].append(f"aod failed: {err}")
        elif rank_class is RankClass.INTERMEDIATE:
            fits = []
            for l, obs in enumerate(aod_obs):
                if aoa_theta[l] is None:
                    continue
                m_l = scene.irs[l].n_sensors
                a_hat = steering_vector(aoa_theta[l], m_l, scene.element_spacing_ratio)
                r_vec = (a_hat.conj() @ obs.matrix).conj() / m_l
                try:
                    est = trust_region_aod(r_vec, obs.effective_signal)
                    fits.append((obs.energy, est.theta))
                except (TrustRegionError, DegenerateFitError) as err:
                    statuses[i].append(f"aod tr {obs.pair}: {err}")
            if fits:
                wsum = sum(w for w, _ in fits)
                theta_aod = float(sum(w * t for w, t in fits) / wsum)
        # RankClass.RANK_ONE: the AOD stays unavailable by construction.

        fused, w = fuse_angles(aoa_theta[i], theta_aod, float(info_aoa[i]), float(info_aod[i]))
        estimates.append(
            AnglePairEstimate(
                irs=i,
                theta_aoa=aoa_theta[i],
                theta_aod=theta_aod,
                theta_fused=fused,
                weights=w,
                iterations=iterations,
                final_residual=float(residual),
                low_confidence=low_conf,
                status="; ".join(statuses[i]) if statuses[i] else "ok",
            )
        )
    return estimates
