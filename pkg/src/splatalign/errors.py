"""Exception types shared across the package."""

from __future__ import annotations


class DegenerateQuaternionError(ValueError):
    """Quaternion norm too close to zero to normalize."""


class EmptyOverlapError(RuntimeError):
    """No valid pixels shared between rendered and observed depth."""


class InitializationOutOfMapError(EmptyOverlapError):
    """The very first localization iteration found no overlap with the map."""


class StaleContextError(RuntimeError):
    """Backward context does not match the scene/pose it claims to come from."""


class NumericError(RuntimeError):
    """Non-finite value encountered during rendering or differentiation."""


class InternalConsistencyError(RuntimeError):
    """A should-be-impossible numerical state; indicates a bug, not bad input."""


class ParseError(ValueError):
    """Malformed dataset or trajectory file."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += f" [{path}"
            loc += f":{line}]" if line is not None else "]"
        elif line is not None:
            loc += f" [line {line}]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class DegenerateCloudError(ValueError):
    """Point cloud too small or rank-deficient for the operation."""


class InvalidSpecError(ValueError):
    """Synthetic-scene spec cannot produce a usable scene."""
