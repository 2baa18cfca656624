"""Error types shared across the package."""


class InputError(ValueError):
    """Rejected input data (non-finite positions, shape mismatches, bad ranges)."""


class FormatError(ValueError):
    """Malformed serialized payload (checkpoint, snapshot, frame, command)."""


class NumericError(RuntimeError):
    """Non-finite value produced during simulation or training."""
