import pytest

from irsloc import make_scene
from irsloc.bench import angle_test_scene


@pytest.fixture(scope="session")
def table1_scene():
    """Reference deployment: BS (0,0), IRSs (10,50)/(10,-50)/(50,0), target (5,5)."""
    return make_scene(seed=101)


@pytest.fixture(scope="session")
def close_scene():
    """Tighter IRS ring: matched-filter SNR comfortably above threshold."""
    return make_scene(
        irs_positions=((8.0, 16.0), (8.0, -14.0), (22.0, 3.0)),
        target_position=(4.0, 5.0),
        seed=11,
        stream_rank=12,
    )


@pytest.fixture(scope="session")
def fullrank_scene():
    """Rich-scattering channels: all effective signals full rank."""
    return angle_test_scene(seed=11)
