"""Matched-filter cascade-delay estimation and observation extraction.

Each IRS's received signal is correlated against each sensing stream over a
lag grid; the peak lag estimates the cascade delay tau_{l,k}.  Critically
sampled white streams have a thumbtack autocorrelation, so sub-sample
refinement evaluates the band-limited correlation on a fine fractional-lag
grid rather than fitting a parabola to the thumbtack's integer samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .streams import FRACTIONAL_TAPS, RankClass, ReceivedSignal, spectral_fractional_delay

FINE_GRID_STEPS = 64


def _delayed_template(x: np.ndarray, mu: float) -> np.ndarray:
    """Stream template delayed by mu samples (band-limited, |mu| < taps)."""
    pad = FRACTIONAL_TAPS // 2
    frame = x.shape[1]
    return spectral_fractional_delay(x, mu, pad=pad)[:, pad : pad + frame]


class WindowBoundaryError(ValueError):
    """Matched-filter peak sits on the search-window boundary."""


@dataclass(frozen=True)
class DelayEstimate:
    pair: tuple[int, int]
    tau_hat: float  # seconds
    peak_metric: float
    grid_index: int  # lag-grid column of the integer peak
    refined: bool
    metric: Optional[np.ndarray] = None  # metric vs lag, for debug dumps
    lag_times: Optional[np.ndarray] = None


@dataclass(frozen=True)
class CascadeObservation:
    """Per-(l,k) matched-filter output consumed by angle estimation."""

    pair: tuple[int, int]
    matrix: np.ndarray  # R_{l,k}: (M_l, n_s)
    effective_signal: np.ndarray  # S_k: (N_k, n_s)
    rank_class: RankClass
    energy: float  # e_{l,k} = ||R_{l,k}||_F^2


def _metric_at(r_l: np.ndarray, x_k: np.ndarray, col: int) -> float:
    frame = x_k.shape[1]
    return float(np.linalg.norm(r_l[:, col : col + frame] @ x_k.conj().T))


def matched_filter_delay(
    r_l: np.ndarray,
    x_k: np.ndarray,
    tau_b2i_k: float,
    search_window: tuple[float, float],
    sample_rate: float,
    time_origin: float = 0.0,
    pair: tuple[int, int] = (-1, -1),
    refine: str = "none",
    keep_metric: bool = False,
) -> DelayEstimate:
    """Peak of ||R_l(t) X_k^H(t - tau - tau_B2I,k)||_2 over a cascade-delay grid.

    search_window is (tau_min, tau_max) in seconds for the cascade delay.
    refine: 'none' keeps the grid peak; 'parabolic' fits three points of the
    squared metric; 'sinc' evaluates the band-limited correlation on a
    1/64-sample grid around the peak.  Either refinement moves the peak by
    at most +-0.5 sample.
    """
    frame = x_k.shape[1]
    lo = int(np.ceil((search_window[0] + tau_b2i_k - time_origin) * sample_rate))
    hi = int(np.floor((search_window[1] + tau_b2i_k - time_origin) * sample_rate))
    lo = max(lo, 0)
    hi = min(hi, r_l.shape[1] - frame)
    if hi < lo:
        raise ValueError("search window does not overlap the received record")

    cols = np.arange(lo, hi + 1)
    metric = np.empty(cols.shape[0])
    xh = x_k.conj().T
    for i, c in enumerate(cols):
        metric[i] = np.linalg.norm(r_l[:, c : c + frame] @ xh)
    peak = int(np.argmax(metric))
    if peak == 0 or peak == len(cols) - 1:
        raise WindowBoundaryError(
            f"matched-filter peak for pair {pair} sits on the window boundary"
        )
    peak_col = cols[peak]
    delta = 0.0
    refined = False
    if refine == "parabolic":
        m0, m1, m2 = metric[peak - 1] ** 2, metric[peak] ** 2, metric[peak + 1] ** 2
        denom = m0 - 2.0 * m1 + m2
        if denom < 0.0:
            delta = float(np.clip(0.5 * (m0 - m2) / denom, -0.5, 0.5))
            refined = True
    elif refine == "sinc":
        delta = _sinc_refine(r_l, x_k, peak_col)
        refined = True
    elif refine != "none":
        raise ValueError(f"unknown refine mode {refine!r}")

    tau_hat = time_origin + (peak_col + delta) / sample_rate - tau_b2i_k
    return DelayEstimate(
        pair=pair,
        tau_hat=float(tau_hat),
        peak_metric=float(metric[peak]),
        grid_index=int(peak_col),
        refined=refined,
        metric=metric if keep_metric else None,
        lag_times=(time_origin + cols / sample_rate - tau_b2i_k) if keep_metric else None,
    )


def _sinc_refine(r_l: np.ndarray, x_k: np.ndarray, peak_col: int) -> float:
    """Fine fractional-lag search of the band-limited correlation.

    Correlates against fractionally delayed stream templates on a fine grid
    spanning +-0.5 sample around the integer peak, then takes a parabolic
    vertex on that fine grid (bias < 1e-3 sample at this resolution).
    """
    frame = x_k.shape[1]
    offsets = np.linspace(-0.5, 0.5, FINE_GRID_STEPS + 1)
    window = r_l[:, peak_col : peak_col + frame]
    vals = np.empty(offsets.shape[0])
    for i, mu in enumerate(offsets):
        template = _delayed_template(x_k, mu)
        vals[i] = np.linalg.norm(window @ template.conj().T)
    best = int(np.argmax(vals))
    lo = offsets[max(best - 1, 0)]
    hi = offsets[min(best + 1, len(offsets) - 1)]

    def metric(mu: float) -> float:
        return -float(np.linalg.norm(window @ _delayed_template(x_k, mu).conj().T))

    # golden-section polish of the band-limited metric to sub-1e-6 samples
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = metric(c), metric(d)
    while b - a > 1e-7:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = metric(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = metric(d)
    return float(np.clip(0.5 * (a + b), -0.5, 0.5))


def extract_observation(
    r_l: np.ndarray,
    x_k: np.ndarray,
    delay_estimate: DelayEstimate,
    effective_signal: np.ndarray,
    rank_class: RankClass,
    sample_rate: Optional[float] = None,
    time_origin: float = 0.0,
    tau_b2i_k: float = 0.0,
) -> CascadeObservation:
    """Matched-filter output R_{l,k} = R_l(t) X_k^H(t - tau_hat - tau_B2I,k).

    Under exact delay and stream orthogonality this equals
    alpha_{l,k} a(theta_l, M) a^H(theta_k, N) S_k plus filtered noise; the
    division by X_k X_k^H in the matched filter is the identity by
    construction.  When the delay estimate carries a sub-sample refinement
    (and sample_rate is given), the correlation uses a fractionally delayed
    stream template, which keeps the transmit-side structure coherent for
    off-grid delays.  The energy weight is the squared Frobenius norm.
    """
    frame = x_k.shape[1]
    col = delay_estimate.grid_index
    template = x_k
    if delay_estimate.refined and sample_rate is not None:
        total = (delay_estimate.tau_hat + tau_b2i_k - time_origin) * sample_rate
        mu = total - col
        if abs(mu) > 1e-9:
            template = _delayed_template(x_k, mu)
    matrix = r_l[:, col : col + frame] @ template.conj().T
    return CascadeObservation(
        pair=delay_estimate.pair,
        matrix=matrix,
        effective_signal=effective_signal,
        rank_class=rank_class,
        energy=float(np.linalg.norm(matrix) ** 2),
    )


def extract_all_observations(
    scene,
    received: ReceivedSignal,
    streams,
    delay_estimates: list[list[DelayEstimate]],
    effective_signals: list[tuple[np.ndarray, RankClass]],
    geometry=None,
) -> list[list[CascadeObservation]]:
    """CascadeObservation for every (l, k) pair from per-pair delay estimates."""
    out = []
    for l in range(scene.n_irs):
        row = []
        for k in range(scene.n_irs):
            sig, cls = effective_signals[k]
            row.append(
                extract_observation(
                    received.samples[l],
                    streams.streams[k],
                    delay_estimates[l][k],
                    sig,
                    cls,
                    sample_rate=received.sample_rate,
                    time_origin=received.time_origin,
                    tau_b2i_k=geometry.bs_delays[k] if geometry is not None else 0.0,
                )
            )
        out.append(row)
    return out


def estimate_all_delays(
    scene,
    received: ReceivedSignal,
    streams,
    geometry,
    window_margin: float = 0.2,
    refine: str = "none",
    keep_metric: bool = False,
) -> list[list[DelayEstimate]]:
    """Matched-filter delay estimates for every (l, k) pair.

    The search window spans the scene's cascade-delay support (bounding box
    of IRS-target distances) plus a relative margin.
    """
    d_min = float(np.min(geometry.distances))
    d_max = float(np.max(geometry.distances))
    c = 299_792_458.0
    window = (
        max(0.0, 2.0 * d_min / c * (1.0 - window_margin) - 2.0 / received.sample_rate),
        2.0 * d_max / c * (1.0 + window_margin) + 2.0 / received.sample_rate,
    )
    out = []
    for l in range(scene.n_irs):
        row = []
        for k in range(scene.n_irs):
            row.append(
                matched_filter_delay(
                    received.samples[l],
                    streams.streams[k],
                    geometry.bs_delays[k],
                    window,
                    received.sample_rate,
                    received.time_origin,
                    pair=(l, k),
                    refine=refine,
                    keep_metric=keep_metric,
                )
            )
        out.append(row)
    return out
