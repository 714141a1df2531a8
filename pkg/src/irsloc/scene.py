"""Scene description: deployment geometry, waveform, power and noise levels.

Defaults follow the reference deployment: BS at the origin, three IRSs at
(10, 50), (10, -50) and (50, 0) m, N_t = 50 transmit antennas, N = 10
reflective elements and M = 10 sensors per IRS, W = 50 MHz, L = 100 samples
per frame, kappa = 7 dBsm, P_max = 50 dBm, sigma^2 = -100 dBm, lambda = 0.3 m.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import GeometryError, fold_bearing

# Sub-stream constants for per-purpose RNG derivation from the scene seed.
_PHASE_STREAM = 0x1A5E
_UNITARY_STREAM = 0x2B6F
_ZF_STREAM = 0x3C70
_NOISE_STREAM = 0x4D81


class ConfigError(ValueError):
    """Invalid scene configuration."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


#: (gain, aoa_at_irs, aod_at_bs) triple of one BS->IRS propagation path.
PathTriple = tuple[complex, float, float]


@dataclass(frozen=True)
class IrsDescriptor:
    """One semi-passive IRS: reflective elements plus co-located sensors."""

    position: tuple[float, float]
    n_elements: int = 10
    n_sensors: int = 10
    # (amplitude, phase) per element; populated by make_scene when omitted.
    phase_profile: tuple[tuple[float, float], ...] = ()

    def reflection_matrix(self) -> np.ndarray:
        """Diagonal reflection coefficient matrix Theta (N x N)."""
        amps = np.array([a for a, _ in self.phase_profile])
        phases = np.array([b for _, b in self.phase_profile])
        return np.diag(amps * np.exp(1j * phases))


@dataclass(frozen=True)
class SceneConfig:
    bs_position: tuple[float, float] = (0.0, 0.0)
    irs: tuple[IrsDescriptor, ...] = ()
    target_position: tuple[float, float] = (5.0, 5.0)
    wavelength: float = 0.3  # m
    rcs: float = db_to_linear(7.0)  # m^2, linear
    noise_power: float = dbm_to_watts(-100.0)  # W per sensor sample
    tx_power: float = dbm_to_watts(50.0)  # W total across streams
    bandwidth: float = 50e6  # Hz
    frame_length: int = 100  # samples per pulse frame (L)
    n_tx: int = 50  # BS transmit antennas (N_t)
    element_spacing_ratio: float = 0.5
    seed: int = 0
    # Optional per-IRS multipath (tuple of PathTriple tuples); None = LoS only.
    bs_multipath: Optional[tuple[tuple[PathTriple, ...], ...]] = None
    # Rows per sensing stream; None applies the floor(L/K) feasibility rule.
    # Fewer rows buy matched-filter peak-to-sidelobe margin at fixed power.
    stream_rank: Optional[int] = None

    def __post_init__(self):
        if not self.irs:
            raise ConfigError("scene needs at least one IRS")
        for name in ("wavelength", "rcs", "noise_power", "tx_power", "bandwidth"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.frame_length < 1 or self.n_tx < 1:
            raise ConfigError("frame_length and n_tx must be positive integers")
        if not 0.0 < self.element_spacing_ratio <= 0.5:
            raise ConfigError(
                f"element_spacing_ratio must lie in (0, 0.5], got {self.element_spacing_ratio}"
            )
        positions = [tuple(map(float, i.position)) for i in self.irs]
        positions.append(tuple(map(float, self.bs_position)))
        if len(set(positions)) != len(positions):
            raise ConfigError("IRS positions must be pairwise distinct and distinct from the BS")
        if tuple(map(float, self.target_position)) in positions[:-1]:
            raise ConfigError("target must not coincide with an IRS")
        for k, irs in enumerate(self.irs):
            if irs.n_elements < 1 or irs.n_sensors < 1:
                raise ConfigError(f"IRS {k} counts must be positive")
            if len(irs.phase_profile) != irs.n_elements:
                raise ConfigError(
                    f"IRS {k} phase profile length {len(irs.phase_profile)} != "
                    f"n_elements {irs.n_elements}"
                )
            for amp, _ in irs.phase_profile:
                if not 0.0 < amp <= 1.0:
                    raise ConfigError(f"IRS {k} amplitudes must lie in (0, 1]")
        if self.bs_multipath is not None and len(self.bs_multipath) != len(self.irs):
            raise ConfigError("bs_multipath must list one path tuple per IRS")
        if self.stream_rank is not None:
            cap = min(self.n_tx, self.frame_length // len(self.irs))
            if not 1 <= self.stream_rank <= cap:
                raise ConfigError(
                    f"stream_rank must lie in [1, {cap}] for this scene, got {self.stream_rank}"
                )

    @property
    def n_irs(self) -> int:
        return len(self.irs)

    @property
    def sample_rate(self) -> float:
        """Critically sampled baseband: f_s = W."""
        return self.bandwidth

    def rng(self, stream: int) -> np.random.Generator:
        """Deterministic per-purpose generator derived from the scene seed."""
        return np.random.default_rng(np.random.SeedSequence((self.seed, stream)))


def random_phase_profile(n_elements: int, seed: int, irs_index: int) -> tuple[tuple[float, float], ...]:
    """Unit-amplitude random phases, frozen per (scene seed, IRS index)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _PHASE_STREAM, irs_index)))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_elements)
    return tuple((1.0, float(b)) for b in phases)


def make_scene(
    irs_positions: Sequence[tuple[float, float]] = ((10.0, 50.0), (10.0, -50.0), (50.0, 0.0)),
    target_position: tuple[float, float] = (5.0, 5.0),
    seed: int = 0,
    n_elements: int = 10,
    n_sensors: int = 10,
    phase_profiles: Optional[Sequence[tuple[tuple[float, float], ...]]] = None,
    **overrides,
) -> SceneConfig:
    """Build a validated scene, drawing random phase profiles from the seed."""
    descriptors = []
    for k, pos in enumerate(irs_positions):
        if phase_profiles is not None:
            profile = tuple(phase_profiles[k])
        else:
            profile = random_phase_profile(n_elements, seed, k)
        descriptors.append(
            IrsDescriptor(
                position=(float(pos[0]), float(pos[1])),
                n_elements=n_elements,
                n_sensors=n_sensors,
                phase_profile=profile,
            )
        )
    return SceneConfig(
        irs=tuple(descriptors),
        target_position=(float(target_position[0]), float(target_position[1])),
        seed=seed,
        **overrides,
    )


def with_target(scene: SceneConfig, target_position: tuple[float, float]) -> SceneConfig:
    return replace(scene, target_position=(float(target_position[0]), float(target_position[1])))


def with_seed(scene: SceneConfig, seed: int) -> SceneConfig:
    """New seed; phase profiles are redrawn to stay a function of the seed."""
    descriptors = tuple(
        replace(irs, phase_profile=random_phase_profile(irs.n_elements, seed, k))
        for k, irs in enumerate(scene.irs)
    )
    return replace(scene, seed=seed, irs=descriptors)


def check_bearing_observable(scene: SceneConfig) -> None:
    """Reject scenes whose bearing sits exactly on the array axis.

    A ULA cannot identify angles at the +-pi/2 endpoints (sin saturates);
    the fold convention handles everything else.
    """
    target = np.asarray(scene.target_position, float)
    for k, irs in enumerate(scene.irs):
        delta = target - np.asarray(irs.position, float)
        theta, _ = fold_bearing(delta[0], delta[1])
        if abs(abs(theta) - np.pi / 2) < 1e-12:
            raise GeometryError(
                f"target bearing from IRS {k} sits on the array axis (theta = +-pi/2)"
            )
