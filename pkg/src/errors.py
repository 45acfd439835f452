# src/errors.py

"""Exception hierarchy. The CLI maps ``exit_code`` straight to the process exit status."""


class PromptSegError(Exception):
    exit_code = 1


# --- Input / usage errors (exit 2) ---

class InputError(PromptSegError):
    exit_code = 2


class ConfigError(InputError):
    pass


class DegeneratePolygonError(InputError):
    pass


class ShapeMismatchError(InputError):
    pass


class MalformedRleError(InputError):
    pass


class DatasetError(InputError):
    """Unparseable dataset or predictions file."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ReferentialIntegrityError(DatasetError):
    pass


class GenerationError(InputError):
    pass


class IncompatibleRunsError(InputError):
    pass


# --- Metric errors ---

class UndefinedMetricError(PromptSegError):
    """Raised when a metric denominator is empty; callers choose the policy."""


# --- Runtime / backend errors (exit 1) ---

class BackendError(PromptSegError):
    def __init__(self, message: str, image_id: int | None = None):
        self.image_id = image_id
        prefix = f"image {image_id}: " if image_id is not None else ""
        super().__init__(f"{prefix}{message}")


class BackendProtocolError(BackendError):
    def __init__(self, message: str, line_number: int, image_id: int | None = None):
        self.line_number = line_number
        super().__init__(f"protocol error on response line {line_number}: {message}", image_id)


class EmptyCandidateError(PromptSegError):
    pass
