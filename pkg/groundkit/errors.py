"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class GroundkitError(Exception):
    exit_code = 1


class ValidationError(GroundkitError):
    """Input violates a domain invariant (exit code 1)."""


class CoordinateRangeError(ValidationError):
    pass


class TokenParseError(ValidationError):
    pass


class FusionError(ValidationError):
    pass


class PromptError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class MetricError(ValidationError):
    pass


class ConfigError(GroundkitError):
    exit_code = 2


class InputFileError(GroundkitError):
    exit_code = 2


class BackendError(GroundkitError):
    """Raised by LLM backends; handled by the retry loop in knowledge_prompts."""
