"""Exception types shared across the package.

The command line maps these onto exit codes: ConfigError exits 2 (the
message carries the offending field path), everything else exits 1.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class TapeError(RuntimeError):
    """A gradient tape was used outside its contract."""


class InputError(ValueError):
    """User-supplied data is malformed (bad token id, empty sequence, bad JSONL line)."""


class ConfigError(ValueError):
    """A configuration value is invalid.

    ``field`` holds a dotted path such as ``"trainer.max_masked_layers"`` so
    callers can surface exactly which setting to fix.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class RunFailure(RuntimeError):
    """Training aborted (e.g. repeated non-finite gradients)."""
