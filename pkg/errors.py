"""
Error types shared by the streaming-scheduler toolkit.

Every error carries a short machine code and a JSON-serializable ``details``
mapping so the command line can report failures as a single JSON object.
"""

from typing import Any, Dict, Optional


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    code = "toolkit_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': self.code,
            'message': self.message,
            'details': self.details,
        }


class InvalidArgumentError(ToolkitError, ValueError):
    code = "invalid_argument"


class ChannelValidationError(InvalidArgumentError):
    """Raised with the list of violated channel properties."""

    code = "channel_invalid"


class SolverError(ToolkitError):
    code = "solver_error"


class InfeasibleLPError(SolverError):
    """Phase I ended with positive artificial mass.

    ``details["farkas"]`` holds the Phase-I dual vector y with y^T A <= 0 and
    y^T b > 0 (up to tolerance), for the rows after negating those with a
    negative right-hand side.
    """

    code = "lp_infeasible"


class UnboundedLPError(SolverError):
    """``details['ray']`` holds a primal direction of unbounded improvement."""

    code = "lp_unbounded"


class IterationLimitError(SolverError):
    code = "lp_iteration_limit"


class CriticalLoadError(ToolkitError):
    code = "no_critical_load"


class ArtifactError(ToolkitError):
    """Missing artifact dependency or unreadable artifact version."""

    code = "artifact_error"


class ConfigError(ToolkitError):
    code = "config_invalid"

    @classmethod
    def from_validation(cls, exc) -> "ConfigError":
        """Wrap a pydantic ``ValidationError`` keeping the error paths."""
        issues = [
            {
                'path': ".".join(str(part) for part in err.get('loc', ())),
                'message': err.get('msg', ''),
            }
            for err in exc.errors()
        ]
        return cls("configuration failed validation", {'issues': issues})
