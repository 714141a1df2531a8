"""ULA steering vectors and scene geometry (distances, angles, cascade gains)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C_LIGHT = 299_792_458.0  # m/s


class GeometryError(ValueError):
    """Degenerate geometry (e.g. target coincides with an IRS)."""


def steering_vector(theta: float, count: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """Steering vector of a uniform linear array.

    Element n carries phase 2*pi*spacing_ratio*n*sin(theta); the first
    element is exactly 1.  With the default half-wavelength spacing the map
    theta -> a(theta) is injective on [-pi/2, pi/2].
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not -np.pi / 2 <= theta <= np.pi / 2:
        raise ValueError(f"theta must lie in [-pi/2, pi/2], got {theta}")
    n = np.arange(count)
    return np.exp(2j * np.pi * spacing_ratio * n * np.sin(theta))


def steering_derivative(theta: float, count: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """Derivative of steering_vector with respect to theta."""
    a = steering_vector(theta, count, spacing_ratio)
    n = np.arange(count)
    return 2j * np.pi * spacing_ratio * n * np.cos(theta) * a


def steering_second_derivative(theta: float, count: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """Second derivative of steering_vector with respect to theta."""
    a = steering_vector(theta, count, spacing_ratio)
    n = np.arange(count)
    c = 2j * np.pi * spacing_ratio * n
    return ((c * np.cos(theta)) ** 2 - c * np.sin(theta)) * a


def fold_bearing(dx: float, dy: float) -> tuple[float, float]:
    """Principal arctangent of dy/dx plus the fold sign.

    Returns (theta, sign) with theta = arctan(dy/dx) in [-pi/2, pi/2] and
    sign = +1 when the unfolded two-argument bearing already lies in that
    range, -1 when it was folded across the array axis.  The folded value is
    what a ULA facing the source observes; tan(theta) equals dy/dx either
    way, so the fold never leaks into the localization line equations.
    """
    phi = np.arctan2(dy, dx)
    if -np.pi / 2 <= phi <= np.pi / 2:
        return float(phi), 1.0
    folded = phi - np.pi if phi > 0 else phi + np.pi
    return float(folded), -1.0


@dataclass(frozen=True)
class GeometryParams:
    """Target-relative geometry for every IRS and IRS pair.

    Attributes:
        distances: (K,) target-to-IRS distances d_k [m].
        angles: (K,) folded bearings theta_k [rad], in [-pi/2, pi/2].
        fold_signs: (K,) +1/-1; d(theta_k)/d(position) flips with this sign.
        delays: (K,) one-way segment delays tau_k [s].
        bs_delays: (K,) BS-to-IRS propagation delays tau_B2I,k [s].
        cascade_delays: (K, K) tau_{l,k} = tau_k + tau_l [s].
        cascade_gains: (K, K) amplitude gains alpha_{l,k}.
        unit_vectors: (K, 2) unit vectors IRS -> target (unfolded trig).
    """

    distances: np.ndarray
    angles: np.ndarray
    fold_signs: np.ndarray
    delays: np.ndarray
    bs_delays: np.ndarray
    cascade_delays: np.ndarray
    cascade_gains: np.ndarray
    unit_vectors: np.ndarray


def geometry_params(scene) -> GeometryParams:
    """Distances, bearings, delays and cascade gains for a scene.

    The cascade amplitude of the path IRS-k -> target -> IRS-l is
    alpha_{l,k} = sqrt(lambda^2 * kappa / (64 pi^3 d_k^2 d_l^2)).
    """
    target = np.asarray(scene.target_position, dtype=float)
    bs = np.asarray(scene.bs_position, dtype=float)
    n_irs = len(scene.irs)

    distances = np.empty(n_irs)
    angles = np.empty(n_irs)
    fold_signs = np.empty(n_irs)
    bs_delays = np.empty(n_irs)
    unit_vectors = np.empty((n_irs, 2))

    for k, irs in enumerate(scene.irs):
        pos = np.asarray(irs.position, dtype=float)
        delta = target - pos
        d = float(np.hypot(*delta))
        if d <= 0.0:
            raise GeometryError(f"target coincides with IRS {k} at {irs.position}")
        distances[k] = d
        angles[k], fold_signs[k] = fold_bearing(delta[0], delta[1])
        unit_vectors[k] = delta / d
        bs_delays[k] = float(np.hypot(*(pos - bs))) / C_LIGHT

    delays = distances / C_LIGHT
    cascade_delays = delays[:, None] + delays[None, :]
    cascade_gains = np.sqrt(
        scene.wavelength**2
        * scene.rcs
        / (64.0 * np.pi**3 * np.outer(distances**2, distances**2))
    )
    return GeometryParams(
        distances=distances,
        angles=angles,
        fold_signs=fold_signs,
        delays=delays,
        bs_delays=bs_delays,
        cascade_delays=cascade_delays,
        cascade_gains=cascade_gains,
        unit_vectors=unit_vectors,
    )
