"""Scene ingestion from TOML configuration files.

Every SceneConfig field has a key; unspecified fields take the default
deployment values.  Powers accept either linear watts or dB convenience
keys (rcs_dbsm, noise_power_dbm, tx_power_dbm).

Example::

    seed = 7
    bandwidth = 50e6
    tx_power_dbm = 50.0

    [[irs]]
    position = [10.0, 50.0]
    n_elements = 10
    n_sensors = 10
"""

from __future__ import annotations

from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .scene import (
    ConfigError,
    IrsDescriptor,
    SceneConfig,
    db_to_linear,
    dbm_to_watts,
    make_scene,
    random_phase_profile,
)

_SCALAR_KEYS = {
    "wavelength": float,
    "rcs": float,
    "noise_power": float,
    "tx_power": float,
    "bandwidth": float,
    "frame_length": int,
    "n_tx": int,
    "element_spacing_ratio": float,
    "seed": int,
    "stream_rank": int,
}

_DB_KEYS = {
    "rcs_dbsm": ("rcs", db_to_linear),
    "noise_power_dbm": ("noise_power", dbm_to_watts),
    "tx_power_dbm": ("tx_power", dbm_to_watts),
}

_DEFAULT_IRS_POSITIONS = ((10.0, 50.0), (10.0, -50.0), (50.0, 0.0))


def scene_from_dict(data: dict) -> SceneConfig:
    """Build a validated SceneConfig from parsed configuration data."""
    kwargs = {}
    for key, cast in _SCALAR_KEYS.items():
        if key in data:
            kwargs[key] = cast(data[key])
    for key, (target, convert) in _DB_KEYS.items():
        if key in data:
            if target in kwargs:
                raise ConfigError(f"both {key} and {target} given")
            kwargs[target] = convert(float(data[key]))
    unknown = set(data) - set(_SCALAR_KEYS) - set(_DB_KEYS) - {
        "bs_position",
        "target_position",
        "irs",
    }
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")

    bs = tuple(float(v) for v in data.get("bs_position", (0.0, 0.0)))
    target = tuple(float(v) for v in data.get("target_position", (5.0, 5.0)))
    seed = int(kwargs.get("seed", 0))

    irs_entries = data.get("irs")
    if irs_entries is None:
        irs_entries = [{"position": p} for p in _DEFAULT_IRS_POSITIONS]
    descriptors = []
    for k, entry in enumerate(irs_entries):
        if "position" not in entry:
            raise ConfigError(f"irs entry {k} lacks a position")
        n_elements = int(entry.get("n_elements", 10))
        n_sensors = int(entry.get("n_sensors", 10))
        if "phase_profile" in entry:
            profile = tuple((float(a), float(b)) for a, b in entry["phase_profile"])
        else:
            profile = random_phase_profile(n_elements, seed, k)
        descriptors.append(
            IrsDescriptor(
                position=tuple(float(v) for v in entry["position"]),
                n_elements=n_elements,
                n_sensors=n_sensors,
                phase_profile=profile,
            )
        )
    kwargs.pop("seed", None)
    return SceneConfig(
        bs_position=bs,
        irs=tuple(descriptors),
        target_position=target,
        seed=seed,
        **kwargs,
    )


def load_scene(path) -> SceneConfig:
    """Parse a TOML scene file into a SceneConfig."""
    with open(Path(path), "rb") as fh:
        data = tomllib.load(fh)
    return scene_from_dict(data)


def default_scene(seed: int = 0) -> SceneConfig:
    """The reference deployment with all defaults."""
    return make_scene(seed=seed)
