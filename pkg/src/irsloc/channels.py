"""BS-to-IRS multipath channels and IRS-target-IRS cascade channels."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .geometry import geometry_params, steering_vector
from .scene import PathTriple, SceneConfig


def los_path(
    scene: SceneConfig, k: int, position: Optional[tuple[float, float]] = None
) -> PathTriple:
    """Line-of-sight BS -> IRS-k path (free-space amplitude, folded bearings)."""
    bs = np.asarray(scene.bs_position, float)
    pos = np.asarray(position if position is not None else scene.irs[k].position, float)
    delta = pos - bs
    d = float(np.hypot(*delta))
    gain = scene.wavelength / (4.0 * np.pi * d)
    # AOA observed at the IRS array, AOD at the BS array.
    from .geometry import fold_bearing

    aoa, _ = fold_bearing(-delta[0], -delta[1])
    aod, _ = fold_bearing(delta[0], delta[1])
    return (complex(gain), aoa, aod)


def random_multipath(
    scene: SceneConfig,
    k: int,
    n_paths: int,
    rng: np.random.Generator,
    gain_scale: float = 1.0,
) -> tuple[PathTriple, ...]:
    """LoS plus n_paths - 1 scattered paths with random angles and phases.

    Scattered amplitudes are gain_scale times the LoS amplitude, with
    uniform random phase; angles are uniform on [-1.2, 1.2] rad.  Handy for
    building effective signals of a prescribed rank.
    """
    los = los_path(scene, k)
    paths = [los]
    for _ in range(n_paths - 1):
        gain = gain_scale * abs(los[0]) * np.exp(2j * np.pi * rng.uniform())
        aoa = float(rng.uniform(-1.2, 1.2))
        aod = float(rng.uniform(-1.2, 1.2))
        paths.append((complex(gain), aoa, aod))
    return tuple(paths)


def make_bs_irs_channel(
    scene: SceneConfig,
    k: int,
    multipath_spec: Optional[Sequence[PathTriple]] = None,
    position: Optional[tuple[float, float]] = None,
) -> np.ndarray:
    """Channel H_k (N x N_t) from the BS to IRS k.

    H_k = sum_r gain_r * a(aoa_r, N) a^H(aod_r, N_t); defaults to the
    geometric LoS path when no multipath spec is given.  A position
    override relocates the IRS for the LoS computation.
    """
    if multipath_spec is None:
        if scene.bs_multipath is not None and position is None:
            multipath_spec = scene.bs_multipath[k]
        else:
            multipath_spec = (los_path(scene, k, position),)
    if len(multipath_spec) < 1:
        raise ValueError("multipath_spec must list at least one path")
    n = scene.irs[k].n_elements
    s = scene.element_spacing_ratio
    h = np.zeros((n, scene.n_tx), dtype=complex)
    for gain, aoa, aod in multipath_spec:
        h += gain * np.outer(
            steering_vector(aoa, n, s), steering_vector(aod, scene.n_tx, s).conj()
        )
    return h


def make_cascade_channel(scene: SceneConfig, l: int, k: int) -> np.ndarray:
    """Rank-1 cascade channel H_{l,k} (M_l x N_k) via the target.

    H_{l,k} = alpha_{l,k} a(theta_l, M) a^H(theta_k, N).
    """
    geo = geometry_params(scene)
    s = scene.element_spacing_ratio
    a_rx = steering_vector(geo.angles[l], scene.irs[l].n_sensors, s)
    a_tx = steering_vector(geo.angles[k], scene.irs[k].n_elements, s)
    return geo.cascade_gains[l, k] * np.outer(a_rx, a_tx.conj())
