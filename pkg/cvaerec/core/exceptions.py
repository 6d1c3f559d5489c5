"""
Error hierarchy shared by every service.

Services raise these; only the command line layer catches them and turns them
into exit codes.
"""

from typing import Any, Dict, Optional


class CVAEError(Exception):
    """Base class for all domain errors"""


class ConfigError(CVAEError, ValueError):
    """Run configuration is invalid or inconsistent"""


class DataFormatError(CVAEError, ValueError):
    """Input file cannot be parsed"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}"
        if line is not None:
            location = f"{location}:{line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
        self.path = path
        self.line = line


class EmptyDatasetError(CVAEError, ValueError):
    """Nothing left after loading or filtering"""


class SplitError(CVAEError, ValueError):
    """Held-out split cannot be built with the requested counts"""


class DimensionError(CVAEError, ValueError):
    """Array shapes do not agree"""


class NonFiniteError(CVAEError, ArithmeticError):
    """A loss or gradient is NaN or infinite"""


class EmptyTargetError(CVAEError, ValueError):
    """A ranking target (masked reconstruction or held-out set) is empty"""


class CheckpointError(CVAEError, ValueError):
    """Checkpoint file is corrupt or incompatible"""


class RunLockedError(CVAEError, RuntimeError):
    """Another command holds the artifact directory"""


class TrainingDivergedError(CVAEError, ArithmeticError):
    """Training produced a non-finite loss; carries the last good parameters"""

    def __init__(self, message: str, last_good: Any = None, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostics = diagnostics or {}
