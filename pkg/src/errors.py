class PipelineError(RuntimeError):
    """Base class for every failure the pipeline reports to the caller."""

    exit_code = 1


class UsageError(PipelineError):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class DataIOError(PipelineError):
    exit_code = 3


class RemoteServiceError(PipelineError):
    exit_code = 4


class ValidationError(PipelineError):
    exit_code = 5


class LabelParseError(ValidationError):
    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}\n--- raw response ---\n{raw}")
        self.raw = raw
