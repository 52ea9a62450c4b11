class ContractError(ValueError):
    """A caller broke an operation's precondition (shapes, masks, roles)."""


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending entry when known."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
        self.detail = message


class CapacityError(ValueError):
    """Sequence longer than the model's position budget."""


class DataError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
