"""Fisher information and Cramér-Rao bounds for hybrid delay/angle localization.

All FIM blocks carry the complex-Gaussian likelihood factor 2/sigma^2 so the
bounds live on the same scale as Monte Carlo estimator variance.  Delay and
angle blocks are diagonal; the 2x2 location FIM follows by the chain rule
through the measurement-to-position Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .channels import make_bs_irs_channel
from .geometry import (
    C_LIGHT,
    GeometryParams,
    fold_bearing,
    geometry_params,
    steering_derivative,
    steering_vector,
)
from .scene import SceneConfig, with_seed, with_target
from .streams import SensingStreams, make_orthogonal_streams, stream_time_derivative

SCHEMES = (
    "collaborative-hybrid",
    "angle-only",
    "delay-only",
    "no-collaboration",
    "single-irs",
)


class SingularFimError(ValueError):
    """Location FIM is rank-deficient; carries the unobservable direction."""

    def __init__(self, message: str, null_direction: Optional[np.ndarray] = None):
        super().__init__(message)
        self.null_direction = null_direction


class AllSingularError(RuntimeError):
    """Every Monte Carlo trial produced a singular FIM."""


@dataclass(frozen=True)
class FimDelay:
    """Diagonal K^2 x K^2 cascade-delay FIM, pairs (l,k) in lexicographic order."""

    matrix: np.ndarray
    unobservable: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class FimAngle:
    """Diagonal K x K FIM for one angle family ('aoa' or 'aod')."""

    matrix: np.ndarray
    kind: str


@dataclass(frozen=True)
class CrbReport:
    scheme: str
    fim_delay: FimDelay
    fim_aoa: FimAngle
    fim_aod: FimAngle
    jacobian: np.ndarray  # 2 x (K + K^2): angle columns, then delay columns
    fim_location: np.ndarray  # 2 x 2
    crb_location: float  # m^2


def _fim_terms(
    scene: SceneConfig,
    streams: SensingStreams,
    geometry: GeometryParams,
    channels: Optional[list[np.ndarray]] = None,
):
    """Per-pair information terms shared by delay and angle FIMs.

    Returns (delay_terms, aoa_terms, aod_terms), each (K, K) indexed [l, k]:
    delay_terms[l, k] is the (l,k) cascade-delay information; aoa_terms[l, k]
    is the k-th path's contribution to F(theta_l_AOA); aod_terms[l, k] the
    l-th receive side's contribution to F(theta_k_AOD).
    """
    n_irs = scene.n_irs
    spacing = scene.element_spacing_ratio
    sigma2 = scene.noise_power
    alpha2 = geometry.cascade_gains**2
    if channels is None:
        channels = [make_bs_irs_channel(scene, k) for k in range(n_irs)]

    # Per-k rows through the effective reflected path: a^H(theta_k) Theta_k H_k W_k
    row_plain = []
    row_deriv = []
    for k in range(n_irs):
        n = scene.irs[k].n_elements
        theta_mat = scene.irs[k].reflection_matrix()
        chain = theta_mat @ channels[k] @ streams.beamformers[k]
        a = steering_vector(geometry.angles[k], n, spacing)
        da = steering_derivative(geometry.angles[k], n, spacing)
        row_plain.append(a.conj() @ chain)  # (n_s,)
        row_deriv.append(da.conj() @ chain)

    # ||a^H Theta H W X_k||^2 = ||a^H Theta H W||^2 since X_k X_k^H = I.
    b_norm2 = np.array([np.linalg.norm(r) ** 2 for r in row_plain])
    c_norm2 = np.array([np.linalg.norm(r) ** 2 for r in row_deriv])
    xdot_norm2 = np.empty(n_irs)
    for k in range(n_irs):
        xdot = stream_time_derivative(streams.streams[k], scene.sample_rate)
        xdot_norm2[k] = np.linalg.norm(row_plain[k] @ xdot) ** 2

    m_sensors = np.array([irs.n_sensors for irs in scene.irs], dtype=float)
    da_rx_norm2 = np.empty(n_irs)
    for l in range(n_irs):
        da_rx = steering_derivative(geometry.angles[l], scene.irs[l].n_sensors, spacing)
        da_rx_norm2[l] = np.linalg.norm(da_rx) ** 2

    delay_terms = (2.0 / sigma2) * m_sensors[:, None] * alpha2 * xdot_norm2[None, :]
    aoa_terms = (2.0 / sigma2) * alpha2 * da_rx_norm2[:, None] * b_norm2[None, :]
    aod_terms = (2.0 / sigma2) * alpha2 * m_sensors[:, None] * c_norm2[None, :]
    return delay_terms, aoa_terms, aod_terms


def fim_delay(
    scene: SceneConfig,
    streams: SensingStreams,
    geometry: Optional[GeometryParams] = None,
) -> FimDelay:
    """Cascade-delay FIM: diagonal entries (2/sigma_l^2) M alpha_{l,k}^2
    ||a^H(theta_k, N) Theta_k H_k W_k Xdot_k||^2, zero off the diagonal."""
    if geometry is None:
        geometry = geometry_params(scene)
    delay_terms, _, _ = _fim_terms(scene, streams, geometry)
    return _fim_delay_from_terms(delay_terms)


def _fim_delay_from_terms(delay_terms: np.ndarray) -> FimDelay:
    n_irs = delay_terms.shape[0]
    diag = delay_terms.reshape(-1)  # (l, k) lexicographic
    unobservable = tuple(
        (i // n_irs, i % n_irs) for i in range(n_irs * n_irs) if diag[i] == 0.0
    )
    return FimDelay(matrix=np.diag(diag), unobservable=unobservable)


def fim_angles(
    scene: SceneConfig,
    streams: SensingStreams,
    geometry: Optional[GeometryParams] = None,
) -> tuple[FimAngle, FimAngle]:
    """AOA and AOD FIMs (diagonal K x K each), summed over collaborative paths."""
    if geometry is None:
        geometry = geometry_params(scene)
    _, aoa_terms, aod_terms = _fim_terms(scene, streams, geometry)
    return (
        FimAngle(matrix=np.diag(aoa_terms.sum(axis=1)), kind="aoa"),
        FimAngle(matrix=np.diag(aod_terms.sum(axis=0)), kind="aod"),
    )


def location_jacobian(geometry: GeometryParams) -> np.ndarray:
    """Derivatives of [theta_1..K, tau_11..KK] with respect to target position.

    Angle column k is the exact gradient of the folded bearing returned by
    geometry_params, delay column (l,k) the gradient of tau_k + tau_l; both
    are expressed through the IRS-to-target unit vectors, which keeps signs
    right on either side of the bearing fold.
    """
    n_irs = geometry.distances.shape[0]
    ux, uy = geometry.unit_vectors[:, 0], geometry.unit_vectors[:, 1]
    jac = np.empty((2, n_irs + n_irs * n_irs))
    jac[0, :n_irs] = -uy / geometry.distances
    jac[1, :n_irs] = ux / geometry.distances
    col = n_irs
    for l in range(n_irs):
        for k in range(n_irs):
            jac[0, col] = (ux[k] + ux[l]) / C_LIGHT
            jac[1, col] = (uy[k] + uy[l]) / C_LIGHT
            col += 1
    return jac


def fim_location(
    fd: FimDelay,
    fa_aoa: FimAngle,
    fa_aod: FimAngle,
    jacobian: np.ndarray,
    singular_rtol: float = 1e-12,
) -> tuple[np.ndarray, float]:
    """Chain-rule location FIM F(x) = J diag(F_aoa + F_aod, F_tau) J^T and
    the scalar bound trace(F(x)^-1)."""
    n_irs = fa_aoa.matrix.shape[0]
    block = np.zeros((n_irs + n_irs * n_irs,) * 2)
    block[:n_irs, :n_irs] = fa_aoa.matrix + fa_aod.matrix
    block[n_irs:, n_irs:] = fd.matrix
    fim = jacobian @ block @ jacobian.T
    fim = 0.5 * (fim + fim.T)
    eigvals, eigvecs = np.linalg.eigh(fim)
    if eigvals[0] <= singular_rtol * max(eigvals[-1], 0.0) or eigvals[-1] <= 0.0:
        raise SingularFimError(
            "location FIM is singular; position unobservable along "
            f"direction {eigvecs[:, 0]}",
            null_direction=eigvecs[:, 0],
        )
    crb = float(np.trace(np.linalg.inv(fim)))
    return fim, crb


def _colocated_geometry(scene: SceneConfig) -> GeometryParams:
    """Geometry with every array relocated to the first IRS's position."""
    target = np.asarray(scene.target_position, float)
    bs = np.asarray(scene.bs_position, float)
    pos = np.asarray(scene.irs[0].position, float)
    n_irs = scene.n_irs
    delta = target - pos
    d = float(np.hypot(*delta))
    if d <= 0.0:
        raise SingularFimError("target coincides with the single-IRS site")
    theta, sign = fold_bearing(delta[0], delta[1])
    distances = np.full(n_irs, d)
    delays = distances / C_LIGHT
    bs_delay = float(np.hypot(*(pos - bs))) / C_LIGHT
    gains = np.sqrt(
        scene.wavelength**2 * scene.rcs / (64.0 * np.pi**3 * np.outer(distances**2, distances**2))
    )
    return GeometryParams(
        distances=distances,
        angles=np.full(n_irs, theta),
        fold_signs=np.full(n_irs, sign),
        delays=delays,
        bs_delays=np.full(n_irs, bs_delay),
        cascade_delays=delays[:, None] + delays[None, :],
        cascade_gains=gains,
        unit_vectors=np.tile(delta / d, (n_irs, 1)),
    )


def scheme_crb(
    scene: SceneConfig,
    scheme: str = "collaborative-hybrid",
    streams: Optional[SensingStreams] = None,
) -> CrbReport:
    """Location CRB for one benchmark scheme.

    angle-only zeroes the delay FIM; delay-only zeroes both angle FIMs;
    no-collaboration keeps only own-pair (k,k) delay entries and own-angle
    terms; single-irs relocates all K arrays (elements and sensors) to the
    first IRS's position, where zero-forcing degenerates and stream
    orthogonality alone separates the returns.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    n_irs = scene.n_irs

    if scheme == "single-irs":
        geometry = _colocated_geometry(scene)
        streams = make_orthogonal_streams(scene, zero_forcing=False)
        pos = scene.irs[0].position
        channels = [
            make_bs_irs_channel(scene, k, position=pos) for k in range(n_irs)
        ]
        delay_terms, aoa_terms, aod_terms = _fim_terms(scene, streams, geometry, channels)
    else:
        geometry = geometry_params(scene)
        if streams is None:
            streams = make_orthogonal_streams(scene)
        delay_terms, aoa_terms, aod_terms = _fim_terms(scene, streams, geometry)

    if scheme == "no-collaboration":
        own = np.eye(n_irs, dtype=bool)
        delay_terms = np.where(own, delay_terms, 0.0)
        aoa_terms = np.where(own, aoa_terms, 0.0)
        aod_terms = np.where(own, aod_terms, 0.0)
    fd = _fim_delay_from_terms(delay_terms)
    fa_aoa = FimAngle(matrix=np.diag(aoa_terms.sum(axis=1)), kind="aoa")
    fa_aod = FimAngle(matrix=np.diag(aod_terms.sum(axis=0)), kind="aod")
    if scheme == "angle-only":
        fd = FimDelay(
            matrix=np.zeros_like(fd.matrix),
            unobservable=tuple((l, k) for l in range(n_irs) for k in range(n_irs)),
        )
    elif scheme == "delay-only":
        zeros = np.zeros((n_irs, n_irs))
        fa_aoa = FimAngle(matrix=zeros, kind="aoa")
        fa_aod = FimAngle(matrix=zeros, kind="aod")

    jac = location_jacobian(geometry)
    fim, crb = fim_location(fd, fa_aoa, fa_aod, jac)
    return CrbReport(
        scheme=scheme,
        fim_delay=fd,
        fim_aoa=fa_aoa,
        fim_aod=fa_aod,
        jacobian=jac,
        fim_location=fim,
        crb_location=crb,
    )


@dataclass(frozen=True)
class Rectangle:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        return (
            float(rng.uniform(self.x_min, self.x_max)),
            float(rng.uniform(self.y_min, self.y_max)),
        )


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        r = self.radius * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * np.pi)
        return (
            float(self.center[0] + r * np.cos(phi)),
            float(self.center[1] + r * np.sin(phi)),
        )


Region = Union[Rectangle, Disc]

DEFAULT_REGION = Rectangle(0.0, 10.0, 0.0, 10.0)


def _entropy(seed, trial: int) -> tuple:
    parts = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    return parts + (trial,)


def trial_scene(scene_template: SceneConfig, region: Region, seed, trial: int) -> SceneConfig:
    """Scene of one Monte Carlo trial: fresh target draw and per-trial seed.

    Counter-based seeding: trial i depends only on (seed, i), so any subset
    of trials reproduces in isolation and extending n_trials keeps the
    prefix bit-identical.  seed may be an int or a tuple of ints.
    """
    rng = np.random.default_rng(np.random.SeedSequence(_entropy(seed, trial)))
    position = region.sample(rng)
    return with_target(with_seed(scene_template, _derive_seed(seed, trial)), position)


def _derive_seed(seed, trial: int) -> int:
    return int(np.random.SeedSequence(_entropy(seed, trial)).generate_state(1)[0])


@dataclass(frozen=True)
class AverageCrbResult:
    mean: float
    values: tuple[float, ...]  # successful trials, in trial order
    singular_trials: int
    n_trials: int


def average_crb(
    scene_template: SceneConfig,
    region: Region,
    n_trials: int,
    seed: int,
    scheme: str = "collaborative-hybrid",
) -> AverageCrbResult:
    """Mean location CRB over uniform target draws from a region.

    Singular-FIM trials are excluded from the mean and counted; if every
    trial is singular an AllSingularError is raised.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    values = []
    singular = 0
    for trial in range(n_trials):
        scene = trial_scene(scene_template, region, seed, trial)
        try:
            report = scheme_crb(scene, scheme)
        except SingularFimError:
            singular += 1
            continue
        values.append(report.crb_location)
    if not values:
        raise AllSingularError(f"all {n_trials} trials produced singular FIMs")
    return AverageCrbResult(
        mean=float(np.mean(values)),
        values=tuple(values),
        singular_trials=singular,
        n_trials=n_trials,
    )


def crb_csv_header() -> list[str]:
    return [
        "scheme",
        "n_irs",
        "n_elements",
        "n_sensors",
        "target_or_region",
        "crb_location_m2",
        "crb_location_db",
        "singular_trials",
    ]


def crb_csv_row(
    scene: SceneConfig,
    scheme: str,
    crb_location: float,
    target_or_region: str,
    singular_trials: int = 0,
) -> list:
    return [
        scheme,
        scene.n_irs,
        scene.irs[0].n_elements,
        scene.irs[0].n_sensors,
        target_or_region,
        f"{crb_location:.12g}",
        f"{10.0 * np.log10(crb_location):.9f}",
        singular_trials,
    ]
