"""Error types shared across the workbench, mapped to CLI exit codes."""


class RisLabError(Exception):
    """Base class for all workbench errors."""

    exit_code = 1


class ValidationError(RisLabError):
    """Malformed input: bad file, bad flag value, broken invariant."""

    exit_code = 2


class SceneFormatError(ValidationError):
    """Scene file could not be parsed; carries the offending line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DataFormatError(ValidationError):
    """Artifact file (dataset, checkpoint, codebook) could not be parsed."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class PlacementError(ValidationError):
    """A realized dipole collides with another one."""


class NumericalError(RisLabError):
    """Numerical failure: singular system, non-finite loss."""

    exit_code = 3


class SolverError(NumericalError):
    """Linear solve failed; carries the offending frequency."""

    def __init__(self, frequency, message):
        super().__init__(f"f={frequency!r}: {message}")
        self.frequency = frequency


class ProvenanceError(RisLabError):
    """Artifact hashes do not match across pipeline stages."""

    exit_code = 4
