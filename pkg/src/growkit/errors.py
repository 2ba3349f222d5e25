"""Exception types shared across the package.

CLI exit-code mapping: InputError and subclasses are usage/validation
problems (exit 2 when raised from argument handling, 1 from verdicts),
CorpusReadError and checkpoint I/O map to exit 3.
"""


class GrowkitError(Exception):
    """Base class for all package errors."""


class InputError(GrowkitError, ValueError):
    """A precondition on caller-supplied values was violated."""


class PatternError(InputError):
    """Malformed stack-pattern string; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class SizeRefusalError(InputError):
    """Configuration too large for an exhaustive check; message reports sizes."""


class CorpusReadError(GrowkitError, OSError):
    """Corpus file could not be read."""


class CheckpointError(GrowkitError):
    """Base class for checkpoint-container problems; has a stable code string."""

    code = "checkpoint"


class HeaderError(CheckpointError):
    code = "bad-header"


class TruncatedPayloadError(CheckpointError):
    code = "truncated-payload"


class TensorBoundsError(CheckpointError):
    code = "tensor-out-of-bounds"


class UnreachableTargetError(GrowkitError):
    """A loss curve never crosses the requested target loss.

    ``curve_name`` identifies which of the two curves fell short.
    """

    def __init__(self, curve_name: str, target: float):
        super().__init__(f"curve {curve_name!r} never reaches loss {target}")
        self.curve_name = curve_name
        self.target = target


class TrainingDiverged(GrowkitError):
    """Loss became non-finite; carries the last good state for recovery."""

    def __init__(self, step: int, last_params, curve):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_params = last_params
        self.curve = curve
