"""RIS-parametrized rich-scattering localization workbench.

Physics (coupled-dipole enclosure simulation), data (supervised localization
records), learning (bidirectional recurrent model with hand-written
backpropagation), control (offline-calibrated configuration codebook), and
evaluation (random-configuration baseline and squared-error reports), glued
together by a deterministic, provenance-checked command line.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    DataFormatError,
    NumericalError,
    PlacementError,
    ProvenanceError,
    RisLabError,
    SceneFormatError,
    SolverError,
    ValidationError,
)
from .scene import (  # noqa: F401
    RISConfig,
    SceneTemplate,
    SOState,
    default_template,
    parse_scene,
    write_scene,
)
from .simulate import EnclosureSolver, resolve_workers  # noqa: F401
from .wavesim import DipoleProperties, FrequencyGrid, SceneInstance, channel  # noqa: F401
