"""Exception types shared across the engine.

Every error carries a short ``kind`` used as the CLI's machine-parseable
prefix (``asge: <kind>-error: ...``) and the exit code the CLI returns for it.
"""

from __future__ import annotations


class AsgeError(Exception):
    kind = "runtime"
    exit_code = 1


class ConfigurationError(AsgeError):
    """Shape, geometry or config-file problem detected before any work is done."""

    kind = "config"
    exit_code = 2

    def __init__(self, message: str, *, field: str | None = None, layer: int | None = None) -> None:
        prefix = ""
        if field is not None:
            prefix = f"{field}: "
        elif layer is not None:
            prefix = f"layer {layer}: "
        super().__init__(prefix + message)
        self.field = field
        self.layer = layer


class UsageError(AsgeError):
    kind = "usage"
    exit_code = 2


class InputError(AsgeError):
    kind = "input"
    exit_code = 2


class FormatError(AsgeError):
    """A binary container (IDX, CIFAR, checkpoint) failed to decode."""

    kind = "format"
    exit_code = 3

    def __init__(self, message: str, *, field: str | None = None, path: object = None) -> None:
        parts = []
        if path is not None:
            parts.append(str(path))
        if field is not None:
            parts.append(field)
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.field = field
        self.path = path


class NonFiniteLossError(AsgeError):
    kind = "nan"
    exit_code = 4

    def __init__(self, layer: int | str, value: float) -> None:
        super().__init__(f"non-finite loss {value!r} at layer {layer}")
        self.layer = layer
        self.value = value


class PipelineError(AsgeError):
    kind = "pipeline"
    exit_code = 4

    def __init__(self, stage: int, cause: BaseException) -> None:
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class GradcheckFailure(AsgeError):
    kind = "gradcheck"
    exit_code = 1
