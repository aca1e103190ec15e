"""Exception types shared across the package."""


class DripError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI prints."""

    kind = "error"


class RejectedInputError(DripError, ValueError):
    kind = "rejected_input"


class ParseError(DripError, ValueError):
    """Malformed file. ``field`` names the offending header field."""

    kind = "parse_error"

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NoThresholdsError(DripError):
    kind = "no_thresholds"


class ProfileMismatchError(DripError):
    kind = "profile_mismatch"
