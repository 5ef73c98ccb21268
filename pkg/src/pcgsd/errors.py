"""Exception hierarchy shared across the package."""


class PCGError(Exception):
    """Base class for all errors raised by pcgsd."""


class ZeroRow(PCGError, ValueError):
    """An embedding row has (numerically) zero norm and cannot be normalized."""

    def __init__(self, row: int):
        super().__init__(f"embedding row {row} has zero norm")
        self.row = row


class FormatError(PCGError):
    """A binary file has the wrong magic, version, or is truncated."""


class ConsistencyError(PCGError):
    """A group index violates one of its structural invariants."""


class DegenerateProposal(PCGError, ZeroDivisionError):
    """Acceptance was requested for a group with zero draft mass."""


class DegenerateResidual(PCGError):
    """The coarse residual [Q_c - P_c]_+ is identically zero."""


class ConfigError(PCGError, ValueError):
    """Invalid or incomplete experiment configuration."""
