"""
Typed errors raised across the pipeline. Each carries the exit code the CLI returns for it.
"""


class SceneStreamerError(Exception):
    exit_code = 4


class ScenarioFormatError(SceneStreamerError, ValueError):
    """The scenario file could not be parsed against the schema."""
    exit_code = 3

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ScenarioValidationError(SceneStreamerError, ValueError):
    """A parsed scenario violates an invariant; `field` names the offending path."""
    exit_code = 3

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class PlacementError(SceneStreamerError, ValueError):
    exit_code = 3


class MapError(SceneStreamerError, ValueError):
    exit_code = 3


class NoAnchorError(SceneStreamerError, LookupError):
    exit_code = 4


class ConsistencyError(SceneStreamerError, ValueError):
    exit_code = 3


class ConfigurationError(SceneStreamerError, ValueError):
    exit_code = 2


class SamplingError(SceneStreamerError, ValueError):
    exit_code = 4


class MetricError(SceneStreamerError, ValueError):
    exit_code = 4


class PairingError(SceneStreamerError, ValueError):
    exit_code = 3


class NumericError(SceneStreamerError, FloatingPointError):
    exit_code = 4


class InjectionFailed(SceneStreamerError):
    """Signal raised when an agent could not be placed within the allowed retries."""
    exit_code = 4

    def __init__(self, attempts):
        self.attempts = attempts
        super().__init__(f"agent injection failed after {attempts} attempts")
