"""Exception hierarchy.

Every error carries a short ``category`` string; the command line prints it
as the machine-parsable part of its one-line error report.
"""


class SesaError(ValueError):
    category = "invalid-input"


class EmptyClassError(SesaError):
    category = "empty-class"


class GridMismatchError(SesaError):
    category = "grid-mismatch"


class DegenerateInputError(SesaError):
    """Input is valid in shape but carries no usable signal (constant field, ...)."""

    category = "degenerate-input"


class DivergenceError(SesaError):
    category = "divergence"

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


class MvolError(SesaError):
    """Malformed MVOL file. ``offset`` is the byte position of the problem."""

    category = "bad-mvol"

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MvolHeaderError(MvolError):
    category = "bad-header"


class MvolPayloadLengthError(MvolError):
    category = "payload-length"


class MvolNonFiniteError(MvolError):
    category = "non-finite"


class MvolUnknownKindError(MvolError):
    category = "unknown-kind"
