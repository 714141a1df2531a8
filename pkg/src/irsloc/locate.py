"""Three-stage hybrid localization from cascade delays and bearings.

Stage 1 collapses the K^2 cascade delays to K segment delays by weighted
least squares.  Stage 2 linearizes range and bearing equations around the
measurements, treating the squared-range term as an extra unknown, and
iterates a total-least-squares correction for the error in the bearing
coefficient matrix.  Stage 3 re-injects the squared-range information to
refine the position, taking square roots with stage-2 signs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .geometry import C_LIGHT

METHODS = ("three-stage", "two-stage", "wls", "ls")

VERTICAL_BEARING_TOL = 1e-6


class SingularSystemError(ValueError):
    """A weighting or normal matrix is numerically singular."""


class NegativeSquareError(ValueError):
    """Stage-3 produced a squared coordinate below the -1e-9 guard."""


class NearVerticalBearingWarning(UserWarning):
    """An angle row was dropped because |cos(theta)| is numerically zero."""


@dataclass(frozen=True)
class HybridMeasurements:
    """Cascade-delay and fused-angle measurements with their covariances.

    tau_hat is lexicographic over pairs (l, k).  A NaN entry in theta_hat
    marks an IRS without any usable bearing; it contributes delay rows
    only.  aod_available records which bearings carry AOD information
    (metadata; the fused variance already reflects it).
    """

    tau_hat: np.ndarray  # (K^2,)
    theta_hat: np.ndarray  # (K,)
    cov_tau: np.ndarray  # (K^2, K^2)
    cov_theta: np.ndarray  # (K, K)
    aod_available: Optional[np.ndarray] = None  # (K,) bool

    def __post_init__(self):
        n_pairs = self.tau_hat.shape[0]
        n_irs = self.theta_hat.shape[0]
        if n_pairs != n_irs * n_irs:
            raise ValueError("tau_hat must have K^2 entries")
        if self.cov_tau.shape != (n_pairs, n_pairs):
            raise ValueError("cov_tau shape mismatch")
        if self.cov_theta.shape != (n_irs, n_irs):
            raise ValueError("cov_theta shape mismatch")


@dataclass(frozen=True)
class Stage1Result:
    segment_delays: np.ndarray  # (K,)
    covariance: np.ndarray  # (K, K)
    residual_norm: float


def stage1_segment_delays(tau_hat: np.ndarray, cov_tau: np.ndarray) -> Stage1Result:
    """WLS collapse of cascade delays tau_{l,k} = tau_l + tau_k.

    The design matrix has a 1 in columns l and k of row (l, k), merging to
    a 2 on diagonal rows; it has full column rank for any K >= 1.
    """
    n_pairs = tau_hat.shape[0]
    n_irs = int(round(np.sqrt(n_pairs)))
    a1 = np.zeros((n_pairs, n_irs))
    for l in range(n_irs):
        for k in range(n_irs):
            a1[l * n_irs + k, l] += 1.0
            a1[l * n_irs + k, k] += 1.0
    try:
        q_chol = scipy.linalg.cho_factor(cov_tau)
    except (scipy.linalg.LinAlgError, ValueError) as err:
        raise SingularSystemError(f"cascade-delay covariance is singular: {err}")
    qi_a = scipy.linalg.cho_solve(q_chol, a1)
    normal = a1.T @ qi_a
    cov = np.linalg.inv(normal)
    x = cov @ (qi_a.T @ tau_hat)
    residual = tau_hat - a1 @ x
    return Stage1Result(
        segment_delays=x, covariance=cov, residual_norm=float(np.linalg.norm(residual))
    )


@dataclass(frozen=True)
class Stage2System:
    """Linearized range/bearing system around the measurements.

    Rows: K range equations A_tau x2 = b_tau and one bearing equation per
    usable angle, with x2 = [x_T, y_T, x_T^2 + y_T^2].  The covariance of
    the range rows propagates the full stage-1 covariance through the
    linearization Delta_b_tau = 2 c^2 tau_k eps_k.
    """

    a_tau: np.ndarray  # (K, 3)
    b_tau: np.ndarray  # (K,)
    r_b_tau: np.ndarray  # (K, K)
    a_theta: np.ndarray  # (Ka, 3)
    b_theta: np.ndarray  # (Ka,)
    r_b_theta: np.ndarray  # (Ka, Ka) diagonal
    r_a_theta: np.ndarray  # (Ka, Ka) diagonal, first-column coefficient errors
    angle_rows: tuple[int, ...]  # IRS index per angle row


def build_stage2_system(
    segment_delays: np.ndarray,
    theta_hat: np.ndarray,
    irs_positions: np.ndarray,
    cov_segments: np.ndarray,
    var_theta: np.ndarray,
) -> Stage2System:
    """Range rows, bearing rows, and their first-order error covariances.

    A bearing row reads x_T tan(theta) - y_T = x_I tan(theta) - y_I; its
    perturbation under an angle error eps is sec^2(theta) eps on the tan
    coefficient, giving the sec^4 variance scalings.  Rows with
    |cos(theta)| below 1e-6 are dropped with a warning (tan blows up).
    """
    n_irs = segment_delays.shape[0]
    pos = np.asarray(irs_positions, dtype=float)
    a_tau = np.column_stack([-2.0 * pos[:, 0], -2.0 * pos[:, 1], np.ones(n_irs)])
    ranges = C_LIGHT * segment_delays
    b_tau = ranges**2 - (pos[:, 0] ** 2 + pos[:, 1] ** 2)
    scale = 2.0 * C_LIGHT**2 * segment_delays
    r_b_tau = np.outer(scale, scale) * cov_segments

    rows = []
    for k in range(n_irs):
        theta = theta_hat[k]
        if not np.isfinite(theta):
            continue
        if abs(np.cos(theta)) < VERTICAL_BEARING_TOL:
            warnings.warn(
                f"bearing of IRS {k} is within {VERTICAL_BEARING_TOL} of vertical; "
                "angle row dropped",
                NearVerticalBearingWarning,
            )
            continue
        rows.append(k)
    a_theta = np.zeros((len(rows), 3))
    b_theta = np.zeros(len(rows))
    var_b = np.zeros(len(rows))
    var_a = np.zeros(len(rows))
    for i, k in enumerate(rows):
        tan_t = np.tan(theta_hat[k])
        sec4 = 1.0 / np.cos(theta_hat[k]) ** 4
        a_theta[i] = (tan_t, -1.0, 0.0)
        b_theta[i] = pos[k, 0] * tan_t - pos[k, 1]
        var_b[i] = pos[k, 0] ** 2 * var_theta[k] * sec4
        var_a[i] = var_theta[k] * sec4
    return Stage2System(
        a_tau=a_tau,
        b_tau=b_tau,
        r_b_tau=r_b_tau,
        a_theta=a_theta,
        b_theta=b_theta,
        r_b_theta=np.diag(var_b),
        r_a_theta=np.diag(var_a),
        angle_rows=tuple(rows),
    )


@dataclass
class Stage2State:
    x2: np.ndarray  # [x_T, y_T, s]
    delta_a: np.ndarray  # TLS estimate of the tan-coefficient errors
    normal_matrix: np.ndarray  # final 3x3 normal matrix
    iterations: int
    converged: bool


def _ls_solution(system: Stage2System) -> np.ndarray:
    a2 = np.vstack([system.a_tau, system.a_theta])
    b2 = np.concatenate([system.b_tau, system.b_theta])
    return np.linalg.pinv(a2) @ b2


def stage2_solve(
    system: Stage2System,
    init: Optional[np.ndarray] = None,
    eps: float = 1e-10,
    max_iter: int = 100,
    handle_coefficient_error: bool = True,
    x_tilde_mode: str = "x",
) -> Stage2State:
    """Iterative TLS/WLS solve of the stage-2 system.

    Starting from plain least squares, each pass rebuilds the bearing-row
    weighting (x_tilde R_dA + R_db)^-1 and the coefficient-error correction
    at the current iterate, then solves the combined normal equations;
    stops when the squared iterate change falls below eps.  x_tilde_mode
    selects the multiplier of the coefficient-error covariance: "x" uses
    x_T^2 (the first-order propagation of the tan-coefficient error, which
    multiplies x_T), "s" uses s^2.
    """
    n_rows = system.a_tau.shape[0] + system.a_theta.shape[0]
    if n_rows < 3:
        raise SingularSystemError(f"stage-2 system has {n_rows} rows; need >= 3")
    x = np.array(_ls_solution(system) if init is None else init, dtype=float)

    try:
        rbt_chol = scipy.linalg.cho_factor(system.r_b_tau)
    except (scipy.linalg.LinAlgError, ValueError) as err:
        raise SingularSystemError(f"range-row covariance is singular: {err}")
    at_rbti = scipy.linalg.cho_solve(rbt_chol, system.a_tau).T  # 3 x K
    normal_tau = at_rbti @ system.a_tau
    rhs_tau = at_rbti @ system.b_tau

    n_angles = system.a_theta.shape[0]
    delta_a = np.zeros(n_angles)
    converged = False
    it = 0
    normal = normal_tau
    for it in range(1, max_iter + 1):
        if n_angles:
            x_tilde = x[0] ** 2 if x_tilde_mode == "x" else x[2] ** 2
            w = x_tilde * system.r_a_theta + system.r_b_theta
            try:
                w_inv = np.linalg.inv(w)
            except np.linalg.LinAlgError as err:
                raise SingularSystemError(f"bearing-row weighting singular: {err}")
            if handle_coefficient_error:
                coeff = x[0] if x_tilde_mode == "x" else x[2]
                r_theta = system.a_theta @ x - system.b_theta
                delta_a = -coeff * (system.r_a_theta @ (w_inv @ r_theta))
            a_eff = system.a_theta.copy()
            a_eff[:, 0] += delta_a
            b_theta_op = a_eff.T @ w_inv  # 3 x Ka
            normal = b_theta_op @ system.a_theta + normal_tau
            rhs = b_theta_op @ system.b_theta + rhs_tau
        else:
            normal, rhs = normal_tau, rhs_tau
        try:
            x_new = np.linalg.solve(normal, rhs)
        except np.linalg.LinAlgError as err:
            raise SingularSystemError(f"stage-2 normal matrix singular: {err}")
        change = float(np.sum((x_new - x) ** 2))
        x = x_new
        if change <= eps:
            converged = True
            break
    return Stage2State(
        x2=x,
        delta_a=delta_a,
        normal_matrix=0.5 * (normal + normal.T),
        iterations=it,
        converged=converged,
    )


@dataclass(frozen=True)
class LocationEstimate:
    position: np.ndarray  # (2,)
    stage1_segment_delays: np.ndarray
    stage2_triple: Optional[np.ndarray]
    stage3_squares: Optional[np.ndarray]
    covariance: Optional[np.ndarray]  # 2x2
    method: str
    consistency_residual: float  # |x^2 + y^2 - s|
    iterations: int
    converged: bool
    clamped: bool = False  # stage-3 clamped a slightly negative square


def stage3_refine(
    stage2: Stage2State, cov2: np.ndarray, negative_guard: float = -1e-9
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Quadratic-consistency refinement using the squared-range component.

    Solves [x^2, y^2] from [x_hat^2, y_hat^2, s_hat] by WLS with the
    first-order covariance J cov(x2) J^T, J = diag(2x, 2y, 1), then takes
    square roots with stage-2 signs.  Returns (squares, position, clamped).
    """
    x_hat, y_hat = stage2.x2[0], stage2.x2[1]
    s_hat = max(stage2.x2[2], 0.0)
    a3 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    b3 = np.array([x_hat**2, y_hat**2, s_hat])
    jac = np.diag([2.0 * x_hat, 2.0 * y_hat, 1.0])
    q3 = jac @ cov2 @ jac.T
    try:
        q_chol = scipy.linalg.cho_factor(q3)
    except (scipy.linalg.LinAlgError, ValueError) as err:
        raise SingularSystemError(f"stage-3 weighting singular: {err}")
    qi_a = scipy.linalg.cho_solve(q_chol, a3)
    squares = np.linalg.solve(a3.T @ qi_a, qi_a.T @ b3)
    clamped = False
    for i in range(2):
        if squares[i] < negative_guard:
            raise NegativeSquareError(
                f"stage-3 squared coordinate {i} = {squares[i]:.3e} below guard"
            )
        if squares[i] < 0.0:
            squares[i] = 0.0
            clamped = True
    position = np.array(
        [np.sign(x_hat) * np.sqrt(squares[0]), np.sign(y_hat) * np.sqrt(squares[1])]
    )
    return squares, position, clamped


def _stacked_wls(system: Stage2System) -> tuple[np.ndarray, np.ndarray]:
    a2 = np.vstack([system.a_tau, system.a_theta])
    b2 = np.concatenate([system.b_tau, system.b_theta])
    q = scipy.linalg.block_diag(system.r_b_tau, system.r_b_theta)
    try:
        q_chol = scipy.linalg.cho_factor(q)
    except (scipy.linalg.LinAlgError, ValueError) as err:
        raise SingularSystemError(f"WLS weighting singular: {err}")
    qi_a = scipy.linalg.cho_solve(q_chol, a2)
    normal = a2.T @ qi_a
    x = np.linalg.solve(normal, qi_a.T @ b2)
    return x, np.linalg.inv(normal)


def location_csv_header() -> list[str]:
    return [
        "method",
        "trial",
        "x_hat",
        "y_hat",
        "error_norm",
        "stage1_residual",
        "consistency_residual",
        "iterations",
    ]


def location_csv_row(
    estimate: LocationEstimate,
    trial: int,
    true_position=None,
    stage1_residual: float = float("nan"),
) -> list:
    err = (
        float(np.linalg.norm(estimate.position - np.asarray(true_position)))
        if true_position is not None
        else float("nan")
    )
    return [
        estimate.method,
        trial,
        f"{estimate.position[0]:.9f}",
        f"{estimate.position[1]:.9f}",
        f"{err:.9e}",
        f"{stage1_residual:.9e}",
        f"{estimate.consistency_residual:.9e}",
        estimate.iterations,
    ]


def localize(
    measurements: HybridMeasurements,
    irs_positions: np.ndarray,
    method: str = "three-stage",
    eps: float = 1e-10,
    max_iter: int = 100,
) -> LocationEstimate:
    """Position estimate by the selected method.

    three-stage runs all stages; two-stage stops after the TLS pass,
    discarding the squared-range consistency; wls weights the stacked
    system without coefficient-error handling; ls is the unweighted
    pseudo-inverse.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    pos = np.asarray(irs_positions, dtype=float)
    stage1 = stage1_segment_delays(measurements.tau_hat, measurements.cov_tau)
    system = build_stage2_system(
        stage1.segment_delays,
        measurements.theta_hat,
        pos,
        stage1.covariance,
        np.diag(measurements.cov_theta),
    )

    if method == "ls":
        x = _ls_solution(system)
        a2 = np.vstack([system.a_tau, system.a_theta])
        pinv = np.linalg.pinv(a2)
        q = scipy.linalg.block_diag(system.r_b_tau, system.r_b_theta)
        cov = (pinv @ q @ pinv.T)[:2, :2]
        return LocationEstimate(
            position=x[:2],
            stage1_segment_delays=stage1.segment_delays,
            stage2_triple=x,
            stage3_squares=None,
            covariance=cov,
            method=method,
            consistency_residual=float(abs(x[0] ** 2 + x[1] ** 2 - x[2])),
            iterations=0,
            converged=True,
        )
    if method == "wls":
        x, cov3 = _stacked_wls(system)
        return LocationEstimate(
            position=x[:2],
            stage1_segment_delays=stage1.segment_delays,
            stage2_triple=x,
            stage3_squares=None,
            covariance=cov3[:2, :2],
            method=method,
            consistency_residual=float(abs(x[0] ** 2 + x[1] ** 2 - x[2])),
            iterations=0,
            converged=True,
        )

    stage2 = stage2_solve(system, eps=eps, max_iter=max_iter)
    cov2 = np.linalg.inv(stage2.normal_matrix)
    x2 = stage2.x2
    if method == "two-stage":
        return LocationEstimate(
            position=x2[:2],
            stage1_segment_delays=stage1.segment_delays,
            stage2_triple=x2,
            stage3_squares=None,
            covariance=cov2[:2, :2],
            method=method,
            consistency_residual=float(abs(x2[0] ** 2 + x2[1] ** 2 - x2[2])),
            iterations=stage2.iterations,
            converged=stage2.converged,
        )

    squares, position, clamped = stage3_refine(stage2, cov2)
    cov_a3 = np.linalg.inv(
        np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).T
        @ np.linalg.solve(
            np.diag([2.0 * x2[0], 2.0 * x2[1], 1.0])
            @ cov2
            @ np.diag([2.0 * x2[0], 2.0 * x2[1], 1.0]),
            np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        )
    )
    denom = np.array([2.0 * max(abs(position[0]), 1e-12), 2.0 * max(abs(position[1]), 1e-12)])
    cov_pos = cov_a3 / np.outer(denom, denom)
    return LocationEstimate(
        position=position,
        stage1_segment_delays=stage1.segment_delays,
        stage2_triple=x2,
        stage3_squares=squares,
        covariance=cov_pos,
        method=method,
        consistency_residual=float(abs(position[0] ** 2 + position[1] ** 2 - x2[2])),
        iterations=stage2.iterations,
        converged=stage2.converged,
    )
