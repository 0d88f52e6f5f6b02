"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A precondition on user-supplied parameters or data was violated."""


class FormatError(ValueError):
    """A file did not conform to its binary format.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ReconstructionError(RuntimeError):
    """Overlap-add synthesis failed the nonzero-overlap (NOLA) condition."""
