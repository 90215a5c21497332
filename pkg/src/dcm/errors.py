"""Exception taxonomy shared across the engine.

Every error the public API raises derives from :class:`DcmError`, so callers
(and the CLI) can distinguish engine failures from programming mistakes.
"""


class DcmError(Exception):
    """Base class for all engine errors."""


# --- configuration ---------------------------------------------------------

class ParseError(DcmError):
    """Config or scenario document is syntactically or structurally invalid."""


class UnknownRole(DcmError):
    """A variable declares a role outside the supported set."""


class GroupReferencesUnknownVariable(DcmError):
    """A group lists a variable that is not declared."""


class ConstraintViolation(DcmError):
    """A within-period causal edge violates the allowed structure."""


# --- panel ingestion / design ----------------------------------------------

class UnknownVariable(DcmError):
    """Input file header names a variable the config does not declare."""


class NonFiniteValue(DcmError):
    """A cell holds NaN or infinity."""


class DuplicateCell(DcmError):
    """Two input rows address the same (customer, period)."""


class TimeVaryingStatic(DcmError):
    """A static covariate or policy value changes over time for a customer."""


class PanelFormatError(DcmError):
    """Malformed input row (bad period, non-binary policy, ragged row)."""


class TargetIsRegressor(DcmError):
    """The design would place the target's own (variable, period) on the RHS."""


class EmptyDesign(DcmError):
    """No regressors are available for the requested target."""


# --- estimation -------------------------------------------------------------

class SingularSystem(DcmError):
    """Unpenalized fit on a rank-deficient design."""

    def __init__(self, message: str, offending_columns=()):
        super().__init__(message)
        self.offending_columns = tuple(offending_columns)


class InsufficientRows(DcmError):
    """Fewer customers than design columns for some regression."""


class ConfigMismatch(DcmError):
    """Artifact was trained under a different configuration."""


# --- scoring ----------------------------------------------------------------

class OrderViolation(DcmError):
    """Internal within-period evaluation order was broken."""


class ShockOnOutcome(DcmError):
    """Scenario shocks an outcome while the config forbids it."""


class InvalidShock(DcmError):
    """Scenario references unknown variables, bad periods, or non-finite amounts."""


# --- attribution / reporting -------------------------------------------------

class TooManyPlayers(DcmError):
    """Exact enumeration requested beyond the coalition limit."""


class UnknownGroup(DcmError):
    """Report grouping references an undeclared group."""


class ZeroDenominator(DcmError):
    """Normalization by zero requested."""


# --- synthetic data -----------------------------------------------------------

class UnstableSpec(DcmError):
    """Generator dynamics violate the configured stability cap."""
