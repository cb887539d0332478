"""
Exception hierarchy for LumiProbe
"""

from typing import Any, Dict, List, Optional


class LumiProbeError(Exception):
    """Base class for every error raised by LumiProbe"""


class DomainError(LumiProbeError, ValueError):
    """An operation was called outside its domain"""


class DegenerateGeometryError(DomainError):
    """Ray configuration does not determine a point"""


class ConvergenceError(LumiProbeError):
    """Optimisation diverged; carries the trace recorded so far"""

    def __init__(self, message: str, trace: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.trace = trace or []


class PFMFormatError(LumiProbeError):
    """Malformed or truncated PFM file"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SceneError(LumiProbeError):
    """Invalid scene description"""


class ConfigError(LumiProbeError):
    """Invalid configuration file"""


class AcceptanceError(LumiProbeError):
    """A roundtrip metric violated the scene's acceptance thresholds"""

    def __init__(self, message: str, failures: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.failures = failures or {}
