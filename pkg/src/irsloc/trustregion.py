"""Trust-region AOD refinement for intermediate-rank effective signals.

Fits alpha * S_k^H a(theta, N) to the receive-side-collapsed observation by
a two-variable (gain magnitude, angle) trust-region iteration.  The global
phase of the gain is projected out analytically, which keeps the problem
two-dimensional and phase-convention free:

    h(alpha, theta) = alpha^2 ||g(theta)||^2 - 2 alpha |<g(theta), r>| + ||r||^2

with g(theta) = S_k^H a(theta, N).  Each subproblem is the exact minimizer
of the quadratic model on a ball (eigendecomposition plus secular-equation
root finding); the ball radius doubles after well-predicted steps and
shrinks to a quarter of the squared step otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (
    steering_derivative,
    steering_second_derivative,
    steering_vector,
)


class TrustRegionError(RuntimeError):
    """Trust-region iteration failed to converge within max_iter."""


class DegenerateFitError(ValueError):
    """S_k a(theta) is numerically zero at the iterate."""


@dataclass(frozen=True)
class AodEstimate:
    alpha: float  # gain magnitude
    theta: float  # radians
    objective: float
    iterations: int
    converged: bool


def _fit_terms(s: np.ndarray, r: np.ndarray, theta: float, spacing: float):
    n = s.shape[0]
    a0 = steering_vector(theta, n, spacing)
    a1 = steering_derivative(theta, n, spacing)
    a2 = steering_second_derivative(theta, n, spacing)
    g0 = s.conj().T @ a0
    g1 = s.conj().T @ a1
    g2 = s.conj().T @ a2
    return g0, g1, g2


def fit_objective(
    s: np.ndarray, r: np.ndarray, alpha: float, theta: float, spacing: float = 0.5
) -> float:
    """Phase-projected residual ||alpha e^{j phi*} S^H a(theta) - r||^2."""
    g0 = s.conj().T @ steering_vector(theta, s.shape[0], spacing)
    big_g = float(np.real(np.vdot(g0, g0)))
    big_b = abs(np.vdot(g0, r))
    return alpha**2 * big_g - 2.0 * alpha * big_b + float(np.real(np.vdot(r, r)))


def fit_gradient_hessian(
    s: np.ndarray, r: np.ndarray, alpha: float, theta: float, spacing: float = 0.5
) -> tuple[float, np.ndarray, np.ndarray]:
    """Objective value, gradient and exact Hessian at (alpha, theta)."""
    g0, g1, g2 = _fit_terms(s, r, theta, spacing)
    big_g = float(np.real(np.vdot(g0, g0)))
    if big_g < 1e-300:
        raise DegenerateFitError("S_k a(theta) is numerically zero")
    dg = 2.0 * float(np.real(np.vdot(g0, g1)))
    ddg = 2.0 * (float(np.real(np.vdot(g1, g1))) + float(np.real(np.vdot(g0, g2))))
    b = np.vdot(g0, r)
    db = np.vdot(g1, r)
    ddb = np.vdot(g2, r)
    absb = abs(b)
    if absb < 1e-300:
        raise DegenerateFitError("fit inner product vanished; no phase reference")
    d_absb = float(np.real(np.conj(b) * db)) / absb
    dd_absb = (abs(db) ** 2 + float(np.real(np.conj(b) * ddb))) / absb - d_absb**2 / absb
    c = float(np.real(np.vdot(r, r)))

    h = alpha**2 * big_g - 2.0 * alpha * absb + c
    grad = np.array(
        [2.0 * alpha * big_g - 2.0 * absb, alpha**2 * dg - 2.0 * alpha * d_absb]
    )
    hess = np.array(
        [
            [2.0 * big_g, 2.0 * alpha * dg - 2.0 * d_absb],
            [2.0 * alpha * dg - 2.0 * d_absb, alpha**2 * ddg - 2.0 * alpha * dd_absb],
        ]
    )
    return h, grad, hess


def solve_tr_subproblem(grad: np.ndarray, hess: np.ndarray, radius: float) -> np.ndarray:
    """Exact minimizer of g^T d + d^T H d / 2 subject to ||d|| <= radius.

    Moré-Sorensen on the eigenbasis: either the interior Newton step, or the
    boundary solution of the secular equation, including the hard case.
    """
    vals, vecs = np.linalg.eigh(hess)
    gt = vecs.T @ grad
    if vals[0] > 0.0:
        d = vecs @ (-gt / vals)
        if np.linalg.norm(d) <= radius:
            return d

    def step_norm(lam: float) -> float:
        return float(np.linalg.norm(gt / (vals + lam)))

    lam_lo = max(0.0, -vals[0])
    if abs(gt[np.argmin(vals)]) < 1e-14 * max(1.0, np.linalg.norm(gt)):
        # hard case: gradient orthogonal to the lowest eigenvector
        lam = lam_lo + 1e-14
        denom = vals + lam
        d = vecs @ (-gt / denom)
        norm_d = np.linalg.norm(d)
        if norm_d < radius:
            tau = np.sqrt(max(radius**2 - norm_d**2, 0.0))
            return d + tau * vecs[:, 0]
        lam_lo = lam
    lam = lam_lo + 1e-12
    hi = lam + 1.0
    while step_norm(hi) > radius:
        hi = 2.0 * hi + 1.0
        if hi > 1e18:
            break
    lo = lam
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if step_norm(mid) > radius:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    lam = hi
    return vecs @ (-gt / (vals + lam))


def initial_guess(
    s: np.ndarray, r: np.ndarray, spacing: float = 0.5, scan_points: int = 256
) -> tuple[float, float]:
    """Coarse-scan initialization and least-squares gain at the best angle.

    Scans the matched-subspace score |<g(theta), r>|^2 / ||g(theta)||^2
    (the fit residual minimizer over the gain); an unnormalized scan is
    biased toward angles where the compressed subspace happens to have
    large norm and lands in wrong basins at reduced rank.
    """
    n = s.shape[0]
    grid = np.linspace(-np.pi / 2, np.pi / 2, scan_points)
    best_theta, best_score = 0.0, -1.0
    for theta in grid:
        g0 = s.conj().T @ steering_vector(theta, n, spacing)
        big_g = float(np.real(np.vdot(g0, g0)))
        if big_g < 1e-300:
            continue
        score = abs(np.vdot(g0, r)) ** 2 / big_g
        if score > best_score:
            best_score, best_theta = score, float(theta)
    g0 = s.conj().T @ steering_vector(best_theta, n, spacing)
    big_g = float(np.real(np.vdot(g0, g0)))
    alpha0 = abs(np.vdot(g0, r)) / big_g if big_g > 0 else 0.0
    return alpha0, best_theta


def trust_region_aod(
    r: np.ndarray,
    s: np.ndarray,
    theta_init: Optional[float] = None,
    alpha_init: Optional[float] = None,
    spacing: float = 0.5,
    radius_init: float = 1e-2,
    eps_rel: float = 1e-12,
    max_iter: int = 200,
) -> AodEstimate:
    """AOD and gain magnitude from a receive-collapsed observation vector.

    r is the conjugate of a^dagger(theta_AOA, M) R_{i,k} (length n_s);
    minimizes the phase-projected fit h over (alpha, theta).  The radius
    bounds the squared step norm; the ratio of actual to predicted decrease
    steers it (doubled above 0.75, else a quarter of the squared step).
    """
    if alpha_init is None or theta_init is None:
        a0, t0 = initial_guess(s, r, spacing)
        alpha = a0 if alpha_init is None else float(alpha_init)
        theta = t0 if theta_init is None else float(theta_init)
    else:
        alpha, theta = float(alpha_init), float(theta_init)

    radius_sq = radius_init
    h_old, grad, hess = fit_gradient_hessian(s, r, alpha, theta, spacing)
    for it in range(1, max_iter + 1):
        d = solve_tr_subproblem(grad, hess, np.sqrt(radius_sq))
        model_drop = float(grad @ d + 0.5 * d @ hess @ d)
        alpha_new = alpha + d[0]
        theta_new = float(np.clip(theta + d[1], -np.pi / 2, np.pi / 2))
        h_new = fit_objective(s, r, alpha_new, theta_new, spacing)
        ratio = (h_new - h_old) / model_drop if model_drop < 0 else -np.inf
        step_sq = float(d @ d)
        if ratio > 0.0 and h_new <= h_old:
            alpha, theta = alpha_new, theta_new
            rel_drop = abs(h_new - h_old) / max(h_old, 1e-300)
            h_old, grad, hess = fit_gradient_hessian(s, r, alpha, theta, spacing)
            if rel_drop <= eps_rel:
                return AodEstimate(alpha, theta, h_old, it, True)
            radius_sq = 2.0 * radius_sq if ratio > 0.75 else 0.25 * step_sq
        else:
            radius_sq = 0.25 * step_sq
            if radius_sq < 1e-30:
                return AodEstimate(alpha, theta, h_old, it, True)
    raise TrustRegionError(f"no convergence in {max_iter} trust-region iterations")
