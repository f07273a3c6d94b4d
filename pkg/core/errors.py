from typing import Any, Dict, Optional


class AnmsError(Exception):
    """Base error. Carries the code/message/details triple used by tool envelopes."""

    code = "anms_error"
    exit_code = 2

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_payload(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


class UsageError(AnmsError):
    code = "usage_error"
    exit_code = 1


class ConfigurationError(AnmsError):
    """The requested configuration cannot run on the given data."""

    code = "configuration_error"


class InputError(AnmsError, ValueError):
    code = "input_error"


class DataFormatError(InputError):
    """A file record failed validation. Names the path, 1-based line and field."""

    code = "data_format_error"

    def __init__(self, path: str, line: int, field: str, reason: str):
        super().__init__(
            f"{path}:{line}: field '{field}': {reason}",
            {"path": path, "line": line, "field": field, "reason": reason},
        )
        self.path = path
        self.line = line
        self.field = field


class DatasetMismatchError(InputError):
    code = "dataset_mismatch"
