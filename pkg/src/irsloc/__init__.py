"""Multi-IRS collaborative hybrid delay/angle target localization toolkit."""

from .geometry import (
    C_LIGHT,
    GeometryError,
    GeometryParams,
    geometry_params,
    steering_derivative,
    steering_vector,
)
from .scene import (
    ConfigError,
    IrsDescriptor,
    SceneConfig,
    make_scene,
    with_seed,
    with_target,
)
from .channels import make_bs_irs_channel, make_cascade_channel
from .streams import (
    RankClass,
    ReceivedSignal,
    SensingStreams,
    StreamInfeasibleError,
    ZeroSignalError,
    effective_signal,
    make_orthogonal_streams,
    synthesize_received,
)
from .crb import (
    AllSingularError,
    AverageCrbResult,
    CrbReport,
    Disc,
    FimAngle,
    FimDelay,
    Rectangle,
    SingularFimError,
    average_crb,
    fim_angles,
    fim_delay,
    fim_location,
    location_jacobian,
    scheme_crb,
)

__version__ = "0.1.0"
