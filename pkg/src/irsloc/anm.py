"""Gridless joint angle estimation via atomic-norm minimization and ADMM.

The batch problem for one IRS couples K observation matrices through a
shared receive-side Hermitian Toeplitz block T(v) while each observation
carries its own transmit-side block, whose form follows the rank of the
effective signal S_k: a Toeplitz block T(u_k) at full rank, a dense PSD
block P_k at intermediate rank (the compressed steering vector loses its
Vandermonde structure), and a scalar p_k at rank one.  All updates are
closed-form; the PSD constraint is enforced by eigenvalue clamping of a
consensus variable, with multiplier ascent tying the two together.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .delay import CascadeObservation
from .geometry import steering_vector
from .streams import RankClass

COND_LIMIT = 1e12


class IllConditionedError(ValueError):
    """Effective-signal pseudo-inverse is numerically unsafe."""


class AdmmConvergenceError(RuntimeError):
    """ADMM hit max_iter before the stopping thresholds; result attached."""

    def __init__(self, message: str, result: "AdmmResult"):
        super().__init__(message)
        self.result = result


class DegenerateToeplitzError(ValueError):
    """Recovered Toeplitz block is numerically zero."""


class BlockKind(Enum):
    TOEPLITZ = "toeplitz"
    DENSE = "dense"
    SCALAR = "scalar"


def toeplitz(u: np.ndarray) -> np.ndarray:
    """Hermitian Toeplitz matrix with first row u; u[0] must be real."""
    u = np.asarray(u)
    if abs(u[0].imag) > 1e-12:
        raise ValueError(f"u[0] must be real, got {u[0]}")
    n = u.shape[0]
    idx = np.subtract.outer(np.arange(n), np.arange(n))  # i - j
    t = np.where(idx <= 0, u[np.abs(idx)], np.conj(u[np.abs(idx)]))
    return t


def toeplitz_adjoint(x: np.ndarray) -> np.ndarray:
    """Adjoint of the Toeplitz map: trace, then doubled superdiagonal sums.

    Satisfies <T(u), X> = Re <u, toeplitz_adjoint(X)> for Hermitian X, the
    factor 2 carrying the two symmetric off-diagonal contributions.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {x.shape}")
    n = x.shape[0]
    out = np.empty(n, dtype=complex)
    out[0] = np.trace(x)
    for k in range(1, n):
        out[k] = 2.0 * np.trace(x, offset=k)
    return out


def toeplitz_weights(n: int) -> np.ndarray:
    """Diagonal weights g with toeplitz_adjoint(T(u)) = g * u."""
    g = 2.0 * (n - np.arange(n))
    g[0] = n
    return g


def psd_project(x: np.ndarray) -> np.ndarray:
    """Nearest positive-semidefinite matrix: clamp negative eigenvalues."""
    h = 0.5 * (x + x.conj().T)
    vals, vecs = np.linalg.eigh(h)
    vals = np.maximum(vals, 0.0)
    return (vecs * vals) @ vecs.conj().T


@dataclass(frozen=True)
class AdmmOptions:
    rho: float = 1.0
    lambda_fit: float = 10.0
    eps_x: float = 1e-8  # threshold on ||X^r - X^{r-1}||_F^2
    eps_z: float = 1e-8  # threshold on ||Z^r - Z^{r-1}||_F^2
    max_iter: int = 5000
    trace_every: int = 0  # record diagnostics every n iterations (0 = off)


@dataclass
class AdmmResult:
    v: np.ndarray  # shared Toeplitz parameter (length M)
    blocks: list  # per-observation u_k / P_k / p_k
    kinds: list
    x: list  # per-observation denoised fit blocks
    iterations: int
    converged: bool
    objective: float
    primal_residual: float
    delta_x: float
    delta_z: float
    trace: Optional[list] = None  # (iter, objective, delta_x, delta_z, min_eig_z)


def _block_matrix(tv: np.ndarray, x: np.ndarray, blk, kind: BlockKind) -> np.ndarray:
    m, w = x.shape
    b = np.empty((m + w, m + w), dtype=complex)
    b[:m, :m] = tv
    b[:m, m:] = x
    b[m:, :m] = x.conj().T
    if kind is BlockKind.TOEPLITZ:
        b[m:, m:] = toeplitz(blk)
    elif kind is BlockKind.DENSE:
        b[m:, m:] = blk
    else:
        b[m:, m:] = blk
    return b


def admm_solve(
    targets: Sequence[np.ndarray],
    weights: Sequence[float],
    kinds: Sequence[BlockKind],
    opts: Optional[AdmmOptions] = None,
) -> AdmmResult:
    """Weighted multi-observation ADMM for the Toeplitz-embedded SDP.

    Minimizes sum_k e_k [tr T(v) + tr(B_k) + lambda ||X_k - T_k||_F^2]
    subject to [[T(v), X_k], [X_k^H, B_k]] >= 0 for every k, where B_k is
    Toeplitz/dense/scalar per kinds[k].  Mixed kinds are allowed, so one
    batch can join observations of different rank classes.
    """
    opts = opts or AdmmOptions()
    m = targets[0].shape[0]
    widths = [t.shape[1] for t in targets]
    n_obs = len(targets)
    e = np.asarray(weights, dtype=float)
    if np.any(e < 0):
        raise ValueError("weights must be nonnegative")
    e_sum = float(e.sum())
    if e_sum <= 0:
        raise ValueError("at least one weight must be positive")
    rho, lam = opts.rho, opts.lambda_fit

    g_m = toeplitz_weights(m)
    g_w = [toeplitz_weights(w) if kinds[k] is BlockKind.TOEPLITZ else None for k, w in enumerate(widths)]

    v = np.zeros(m, dtype=complex)
    blocks = []
    for k, w in enumerate(widths):
        if kinds[k] is BlockKind.TOEPLITZ:
            blocks.append(np.zeros(w, dtype=complex))
        elif kinds[k] is BlockKind.DENSE:
            blocks.append(np.zeros((w, w), dtype=complex))
        else:
            blocks.append(0.0)
    x = [np.array(t, dtype=complex) for t in targets]
    z = [np.zeros((m + w, m + w), dtype=complex) for w in widths]
    gmul = [np.zeros((m + w, m + w), dtype=complex) for w in widths]

    delta_x = delta_z = np.inf
    trace_rows: list = []
    it = 0
    for it in range(1, opts.max_iter + 1):
        # (u_k / P_k / p_k, v, X_k) from current (Z, G)
        v_acc = np.zeros(m, dtype=complex)
        delta_x = 0.0
        for k in range(n_obs):
            w = widths[k]
            g0 = gmul[k][:m, :m]
            g1 = gmul[k][:m, m:]
            g2 = gmul[k][m:, m:]
            z0 = z[k][:m, :m]
            z1 = z[k][:m, m:]
            z2 = z[k][m:, m:]
            if kinds[k] is BlockKind.TOEPLITZ:
                num = toeplitz_adjoint(g2) + 2.0 * rho * toeplitz_adjoint(z2)
                num[0] -= w
                blocks[k] = num / (2.0 * rho * g_w[k])
                blocks[k][0] = blocks[k][0].real
            elif kinds[k] is BlockKind.DENSE:
                p = z2 + (g2 - np.eye(w)) / (2.0 * rho)
                blocks[k] = 0.5 * (p + p.conj().T)
            else:
                blocks[k] = float((z2 + (g2 - 1.0) / (2.0 * rho)).real[0, 0])
            v_acc += e[k] * (toeplitz_adjoint(g0) + 2.0 * rho * toeplitz_adjoint(z0))
            x_new = (lam * targets[k] + g1 + 2.0 * rho * z1) / (lam + 2.0 * rho)
            delta_x = max(delta_x, float(np.linalg.norm(x_new - x[k]) ** 2))
            x[k] = x_new
        v_acc[0] -= e_sum * m
        v = v_acc / (2.0 * rho * e_sum * g_m)
        v[0] = v[0].real

        # PSD consensus and multiplier ascent
        tv = toeplitz(v)
        delta_z = 0.0
        for k in range(n_obs):
            b = _block_matrix(tv, x[k], blocks[k], kinds[k])
            z_new = psd_project(b - gmul[k] / (2.0 * rho))
            delta_z = max(delta_z, float(np.linalg.norm(z_new - z[k]) ** 2))
            z[k] = z_new
            gmul[k] = gmul[k] + rho * (z[k] - b)
        if opts.trace_every and (it % opts.trace_every == 0 or it == 1):
            min_eig = min(
                float(np.linalg.eigvalsh(z[k])[0]) for k in range(n_obs)
            )
            trace_rows.append(
                (
                    it,
                    admm_objective(v, blocks, kinds, x, targets, e, lam),
                    delta_x,
                    delta_z,
                    min_eig,
                )
            )
        if delta_x <= opts.eps_x and delta_z <= opts.eps_z:
            break

    primal = 0.0
    tv = toeplitz(v)
    for k in range(n_obs):
        b = _block_matrix(tv, x[k], blocks[k], kinds[k])
        primal = max(primal, float(np.linalg.norm(z[k] - b)))
    result = AdmmResult(
        v=v,
        blocks=blocks,
        kinds=list(kinds),
        x=x,
        iterations=it,
        converged=delta_x <= opts.eps_x and delta_z <= opts.eps_z,
        objective=admm_objective(v, blocks, kinds, x, targets, e, lam),
        primal_residual=primal,
        delta_x=delta_x,
        delta_z=delta_z,
        trace=trace_rows if opts.trace_every else None,
    )
    return result


def admm_objective(v, blocks, kinds, x, targets, weights, lam) -> float:
    obj = 0.0
    tr_v = float(np.real(toeplitz(v).trace()))
    for k, t in enumerate(targets):
        if kinds[k] is BlockKind.TOEPLITZ:
            tr_b = float(np.real(toeplitz(blocks[k]).trace()))
        elif kinds[k] is BlockKind.DENSE:
            tr_b = float(np.real(np.trace(blocks[k])))
        else:
            tr_b = float(blocks[k])
        obj += weights[k] * (tr_v + tr_b + lam * float(np.linalg.norm(x[k] - t) ** 2))
    return obj


def preprocess_observation(obs: CascadeObservation) -> tuple[np.ndarray, BlockKind]:
    """Right-multiply by the rank-appropriate pseudo-inverse of S_k.

    Full rank: R S_k^H (S_k S_k^H)^-1 -> M x N target with a Toeplitz block.
    Intermediate rank r: R V_r Sigma_r^-1 -> M x r target, dense PSD block.
    Rank one: R v sigma^-1 -> M x 1 target, scalar block.
    """
    s = obs.effective_signal
    if obs.rank_class is RankClass.FULL:
        gram = s @ s.conj().T
        if np.linalg.cond(gram) > COND_LIMIT:
            raise IllConditionedError(
                f"cond(S_k S_k^H) > {COND_LIMIT:g} for pair {obs.pair}"
            )
        target = obs.matrix @ s.conj().T @ np.linalg.inv(gram)
        return target, BlockKind.TOEPLITZ
    u, sv, vh = np.linalg.svd(s, full_matrices=False)
    rank = int(np.count_nonzero(sv > 1e-8 * sv[0]))
    if sv[0] / sv[rank - 1] > COND_LIMIT:
        raise IllConditionedError(f"effective signal ill-conditioned for pair {obs.pair}")
    target = obs.matrix @ vh[:rank].conj().T / sv[:rank]
    kind = BlockKind.SCALAR if obs.rank_class is RankClass.RANK_ONE else BlockKind.DENSE
    return target, kind


def _uniform_batch(
    observations: Sequence[CascadeObservation],
    expected: RankClass,
    opts: Optional[AdmmOptions],
    raise_on_max_iter: bool = True,
) -> AdmmResult:
    if not observations:
        raise ValueError("empty observation batch")
    for obs in observations:
        if obs.rank_class is not expected:
            raise ValueError(
                f"observation {obs.pair} has rank class {obs.rank_class}, expected {expected}"
            )
    targets, kinds, weights = [], [], []
    for obs in observations:
        t, kind = preprocess_observation(obs)
        targets.append(t)
        kinds.append(kind)
        weights.append(obs.energy)
    result = admm_solve(targets, weights, kinds, opts)
    if not result.converged and raise_on_max_iter:
        raise AdmmConvergenceError(
            f"ADMM stopped at max_iter with delta_x={result.delta_x:.3e}, "
            f"delta_z={result.delta_z:.3e}",
            result,
        )
    return result


def admm_joint_full_rank(
    observations: Sequence[CascadeObservation],
    opts: Optional[AdmmOptions] = None,
    raise_on_max_iter: bool = True,
) -> AdmmResult:
    """Joint AOA solve over observations whose S_k all have full rank."""
    return _uniform_batch(observations, RankClass.FULL, opts, raise_on_max_iter)


def admm_joint_reduced_rank(
    observations: Sequence[CascadeObservation],
    opts: Optional[AdmmOptions] = None,
    raise_on_max_iter: bool = True,
) -> AdmmResult:
    """Joint AOA solve for intermediate-rank S_k (dense PSD right blocks)."""
    return _uniform_batch(observations, RankClass.INTERMEDIATE, opts, raise_on_max_iter)


def admm_rank1(
    observations: Sequence[CascadeObservation],
    opts: Optional[AdmmOptions] = None,
    raise_on_max_iter: bool = True,
) -> tuple[AdmmResult, bool]:
    """AOA solve for rank-one S_k; AOD is unestimable in this case.

    Returns (result, aod_unavailable=True): the transmit-side steering is
    compressed into a scalar by the single right singular vector, so only
    the receive angle survives.
    """
    result = _uniform_batch(observations, RankClass.RANK_ONE, opts, raise_on_max_iter)
    return result, True


def angle_from_toeplitz(
    v: np.ndarray,
    count: int,
    spacing_ratio: float = 0.5,
    grid_points: int = 2048,
    tol: float = 1e-8,
    gap_threshold: float = 1.01,
) -> tuple[float, bool]:
    """Angle read-off: dominant eigenvector of T(v), then steering-match.

    Maximizes |a(theta)^H w| over a coarse grid followed by golden-section
    refinement.  Returns (theta_hat, low_confidence): the flag is set when
    the eigenvalue gap ratio falls under gap_threshold (no dominant single
    source).
    """
    t = toeplitz(np.asarray(v, dtype=complex))
    scale = np.linalg.norm(t)
    if not np.isfinite(scale) or scale < 1e-300:
        raise DegenerateToeplitzError("T(v) is numerically zero")
    vals, vecs = np.linalg.eigh(t)
    w = vecs[:, -1]
    low_confidence = bool(vals.shape[0] > 1 and vals[-1] <= gap_threshold * max(vals[-2], 0.0))

    grid = np.linspace(-np.pi / 2, np.pi / 2, grid_points)
    n = np.arange(count)
    phases = np.exp(-2j * np.pi * spacing_ratio * np.outer(np.sin(grid), n))
    scores = np.abs(phases @ w)
    best = int(np.argmax(scores))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, grid_points - 1)]

    def score(theta: float) -> float:
        return -abs(steering_vector(theta, count, spacing_ratio).conj() @ w)

    theta_hat = _golden_section(score, lo, hi, tol)
    return float(theta_hat), low_confidence


def _golden_section(fn, lo: float, hi: float, tol: float) -> float:
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)
