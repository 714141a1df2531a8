"""Orthogonal sensing streams, zero-forcing beamformers, received signals.

Streams are disjoint row blocks of a single seeded Haar unitary, so
X_k X_k^H = I and X_k X_k'^H = 0 hold exactly.  Beamformers project each
stream onto the null space of the other IRSs' BS channels so that IRS k
only reflects stream k, and are jointly scaled to the transmit power
budget.  Received signals are critically sampled at f_s = W.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.signal

from .channels import make_bs_irs_channel, make_cascade_channel
from .geometry import GeometryParams, geometry_params
from .scene import SceneConfig, _NOISE_STREAM, _UNITARY_STREAM, _ZF_STREAM

RANK_TOLERANCE = 1e-8
FRACTIONAL_TAPS = 32


class StreamInfeasibleError(ValueError):
    """K * N_t > L with stream rank reduction disabled."""


class ZeroSignalError(ValueError):
    """Effective reflected signal is numerically zero."""


class RankClass(Enum):
    FULL = "full"
    INTERMEDIATE = "intermediate"
    RANK_ONE = "rank_one"


@dataclass(frozen=True)
class SensingStreams:
    """Per-IRS stream matrices X_k (n_s x L) and beamformers W_k (N_t x n_s)."""

    streams: tuple[np.ndarray, ...]
    beamformers: tuple[np.ndarray, ...]
    stream_dim: int
    rank_reduced: bool
    zf_exact: bool

    @property
    def combined(self) -> np.ndarray:
        """Transmitted signal matrix X = sum_k W_k X_k (N_t x L)."""
        return sum(w @ x for w, x in zip(self.beamformers, self.streams))


def make_orthogonal_streams(
    scene: SceneConfig,
    allow_rank_reduction: bool = True,
    zero_forcing: bool = True,
    whiten_effective: bool = False,
) -> SensingStreams:
    """Draw mutually orthogonal sensing streams and matching beamformers.

    When K * N_t exceeds the frame length the per-IRS stream row count is
    reduced to floor(L / K), which keeps the orthogonality exact.

    whiten_effective applies a within-null-space equalizer to each W_k so
    that the effective reflected signal Theta_k H_k W_k has equal singular
    values; this removes the pseudo-inverse noise amplification in the
    angle estimators without violating the zero-forcing constraint.
    """
    n_irs, n_tx, frame = scene.n_irs, scene.n_tx, scene.frame_length
    if scene.stream_rank is not None:
        stream_dim = scene.stream_rank
        rank_reduced = stream_dim < n_tx
    elif n_irs * n_tx <= frame:
        stream_dim = n_tx
        rank_reduced = False
    else:
        if not allow_rank_reduction:
            raise StreamInfeasibleError(
                f"K*N_t = {n_irs * n_tx} > L = {frame}; enable rank reduction"
            )
        stream_dim = frame // n_irs
        rank_reduced = True
        if stream_dim < 1:
            raise StreamInfeasibleError(f"frame length {frame} too short for {n_irs} streams")

    rng = scene.rng(_UNITARY_STREAM)
    g = rng.standard_normal((frame, frame)) + 1j * rng.standard_normal((frame, frame))
    q, r = np.linalg.qr(g)
    q = q * (np.diagonal(r) / np.abs(np.diagonal(r)))  # fix QR phase ambiguity
    streams = tuple(
        q[:, k * stream_dim : (k + 1) * stream_dim].conj().T for k in range(n_irs)
    )

    beamformers, zf_exact = _make_beamformers(scene, stream_dim, zero_forcing)
    if whiten_effective:
        beamformers = _whiten_beamformers(scene, beamformers)
    return SensingStreams(
        streams=streams,
        beamformers=beamformers,
        stream_dim=stream_dim,
        rank_reduced=rank_reduced,
        zf_exact=zf_exact,
    )


def _make_beamformers(scene, stream_dim, zero_forcing):
    n_irs, n_tx = scene.n_irs, scene.n_tx
    rng = scene.rng(_ZF_STREAM)
    raw = []
    zf_exact = True
    channels = [make_bs_irs_channel(scene, k) for k in range(n_irs)]
    for k in range(n_irs):
        others = [channels[j] for j in range(n_irs) if j != k]
        basis = None
        if zero_forcing and others:
            stacked = np.vstack(others)
            basis = scipy.linalg.null_space(stacked)  # N_t x q
        if basis is not None and basis.shape[1] >= stream_dim:
            w = basis[:, :stream_dim].astype(complex)
        else:
            if zero_forcing and others:
                zf_exact = False
            g = rng.standard_normal((n_tx, stream_dim)) + 1j * rng.standard_normal(
                (n_tx, stream_dim)
            )
            w, _ = np.linalg.qr(g)
        raw.append(w)
    total = sum(np.linalg.norm(w) ** 2 for w in raw)
    scale = np.sqrt(scene.frame_length * scene.tx_power / total)
    return tuple(scale * w for w in raw), zf_exact


def _whiten_beamformers(scene, beamformers):
    """Equalize each effective signal to equal singular values.

    Replaces W_k by W_k (S_k^+ J_k) with J_k the right-singular-row isometry
    of S_k = Theta_k H_k W_k, then restores the total power budget.  The
    update stays inside the column space of W_k, so zero-forcing survives;
    rank-deficient S_k are whitened on their nonzero singular space.
    """
    new_w = []
    for k in range(scene.n_irs):
        theta = scene.irs[k].reflection_matrix()
        h = make_bs_irs_channel(scene, k)
        s = theta @ h @ beamformers[k]
        u, sv, vh = np.linalg.svd(s, full_matrices=False)
        rank = int(np.count_nonzero(sv > RANK_TOLERANCE * sv[0]))
        equalizer = vh[:rank].conj().T @ (vh[:rank] / sv[:rank, None])
        new_w.append(beamformers[k] @ equalizer)
    total = sum(np.linalg.norm(w) ** 2 for w in new_w)
    scale = np.sqrt(scene.frame_length * scene.tx_power / total)
    return tuple(scale * w for w in new_w)


def stream_time_derivative(x: np.ndarray, sample_rate: float) -> np.ndarray:
    """Per-sample time derivative via spectral differentiation.

    Multiplies each row's DFT by j*2*pi*f, consistent with band-limited
    streams of bandwidth equal to the sample rate.
    """
    freqs = np.fft.fftfreq(x.shape[-1], d=1.0 / sample_rate)
    return np.fft.ifft(np.fft.fft(x, axis=-1) * (2j * np.pi * freqs), axis=-1)


def effective_signal(
    scene: SceneConfig, k: int, streams: SensingStreams
) -> tuple[np.ndarray, RankClass]:
    """Effective reflected signal S_k = Theta_k H_k W_k and its rank class."""
    theta = scene.irs[k].reflection_matrix()
    h = make_bs_irs_channel(scene, k)
    s = theta @ h @ streams.beamformers[k]
    sv = np.linalg.svd(s, compute_uv=False)
    if sv[0] <= 0.0 or not np.isfinite(sv[0]):
        raise ZeroSignalError(f"effective signal of IRS {k} is numerically zero")
    rank = int(np.count_nonzero(sv > RANK_TOLERANCE * sv[0]))
    if rank == 0:
        raise ZeroSignalError(f"effective signal of IRS {k} is numerically zero")
    n = scene.irs[k].n_elements
    if rank == n:
        cls = RankClass.FULL
    elif rank == 1:
        cls = RankClass.RANK_ONE
    else:
        cls = RankClass.INTERMEDIATE
    return s, cls


def fractional_delay_kernel(mu: float, taps: int = FRACTIONAL_TAPS) -> np.ndarray:
    """Windowed-sinc interpolation kernel for a fractional delay mu in [0, 1)."""
    center = taps // 2
    n = np.arange(taps)
    kernel = np.sinc(n - center - mu) * np.hamming(taps)
    return kernel / np.sum(kernel)


def spectral_fractional_delay(x: np.ndarray, mu: float, pad: int = FRACTIONAL_TAPS) -> np.ndarray:
    """Exact band-limited fractional delay via an FFT phase ramp.

    Zero-pads each row by pad on both sides, applies exp(-2j pi f mu) in
    the DFT domain, and returns rows of length n + 2 pad whose content is
    shifted by mu in [-1, 1] samples relative to an offset of pad columns.
    Unlike a windowed-sinc kernel this has no in-band rolloff, so delayed
    signals stay consistent with spectral-derivative Fisher information.
    """
    n = x.shape[-1]
    total = n + 2 * pad
    buf = np.zeros(x.shape[:-1] + (total,), dtype=complex)
    buf[..., pad : pad + n] = x
    freqs = np.fft.fftfreq(total)
    ramp = np.exp(-2j * np.pi * freqs * mu)
    return np.fft.ifft(np.fft.fft(buf, axis=-1) * ramp, axis=-1)


@dataclass(frozen=True)
class ReceivedSignal:
    """Sampled sensor outputs per IRS, on a shared clock."""

    samples: tuple[np.ndarray, ...]  # per IRS: (M_l, n_samples) complex
    sample_rate: float
    time_origin: float
    offgrid: bool  # True when a delay fell off the grid with interpolation off


def synthesize_received(
    scene: SceneConfig,
    streams: SensingStreams,
    geometry: Optional[GeometryParams] = None,
    fractional_delay: bool = False,
) -> ReceivedSignal:
    """Noisy sensor snapshots R_l(t) for every IRS l.

    R_l = sum_k H_{l,k} Theta_k H_k X(t - tau_B2I,k - tau_{l,k}) + N_l with
    i.i.d. circular complex Gaussian noise of variance scene.noise_power per
    sample per sensor.  Delays are realized as integer sample shifts, or via
    an exact band-limited fractional shift when fractional_delay is set.
    Deterministic given scene.seed.
    """
    if geometry is None:
        geometry = geometry_params(scene)
    fs = scene.sample_rate
    frame = scene.frame_length
    n_irs = scene.n_irs

    total_delays = geometry.bs_delays[None, :] + geometry.cascade_delays  # (l, k)
    shifts = total_delays * fs
    int_shifts = np.round(shifts).astype(int)
    offgrid = bool(np.max(np.abs(shifts - int_shifts)) > 1e-9) and not fractional_delay

    center = FRACTIONAL_TAPS // 2 if fractional_delay else 0
    pad = center + 2
    n_cols = frame + int(np.ceil(shifts.max())) + FRACTIONAL_TAPS + pad
    time_origin = -pad / fs

    x_total = streams.combined
    theta = [scene.irs[k].reflection_matrix() for k in range(n_irs)]
    h_bs = [make_bs_irs_channel(scene, k) for k in range(n_irs)]

    rng = scene.rng(_NOISE_STREAM)
    out = []
    for l in range(n_irs):
        m = scene.irs[l].n_sensors
        r = np.zeros((m, n_cols), dtype=complex)
        for k in range(n_irs):
            gain = make_cascade_channel(scene, l, k) @ theta[k] @ h_bs[k]  # M x N_t
            component = gain @ x_total
            if fractional_delay:
                n0 = int(np.floor(shifts[l, k]))
                mu = shifts[l, k] - n0
                delayed = spectral_fractional_delay(component, mu, pad=center)
                start = pad + n0 - center
                r[:, start : start + delayed.shape[1]] += delayed
            else:
                start = pad + int_shifts[l, k]
                r[:, start : start + frame] += component
        noise = rng.standard_normal((m, n_cols)) + 1j * rng.standard_normal((m, n_cols))
        r += np.sqrt(scene.noise_power / 2.0) * noise
        out.append(r)
    return ReceivedSignal(
        samples=tuple(out), sample_rate=fs, time_origin=time_origin, offgrid=offgrid
    )
