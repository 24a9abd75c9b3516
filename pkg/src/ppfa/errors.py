"""Exception types shared across the package.

Grouped by the layer that raises them; the CLI maps a subset to exit codes.
"""


class PpfaError(Exception):
    """Base class for all package errors."""


# --- encoding / field layer ---

class OverflowRange(PpfaError):
    """Value outside the representable fixed-point band."""


class DecodeOutOfBand(PpfaError):
    """Centered lift exceeds the signed band; signals overflow during computation."""


# --- preprocessing / dealer ---

class PreprocessingExhausted(PpfaError):
    """Correlated-randomness stream ran out (or an item was consumed twice)."""


class FormatMismatch(PpfaError):
    """Material file header does not match the expected parameters or session."""


# --- transport ---

class TransportFailure(PpfaError):
    """Generic channel failure during an exchange."""


class PeerFailure(TransportFailure):
    """A peer disappeared mid-computation; the semi-honest model aborts."""


class PartyMissing(TransportFailure):
    """Not all parties participated in an operation that requires everyone."""


class ParamMismatch(PpfaError):
    """Handshake disagreement on field parameters or session id."""


class ConnectTimeout(PpfaError):
    """Endpoints not reachable within the allowed time."""


class UnsupportedBackend(PpfaError):
    """The selected transport backend does not support the requested feature."""


# --- ABB ---

class ShapeMismatch(PpfaError):
    """Operand shapes are incompatible."""


class RangeNotCertified(PpfaError):
    """Caller-supplied range for a division/sqrt is empty or not sign-definite."""


class SessionNotReady(PpfaError):
    """Operation issued before the session was connected."""


class RevealNotAllowed(PpfaError):
    """Output of a non-whitelisted value requested in a production session."""


# --- grid ---

class SchemaError(PpfaError):
    """Grid or measurement file does not match the documented schema."""


class DisconnectedGraph(SchemaError):
    """Some bus is not reachable from the slack bus."""


class SlackMissing(SchemaError):
    """No slack bus (or more than one) in the grid file."""


class RankDeficient(PpfaError):
    """Regressor matrix of the admittance estimator does not have full column rank."""


class DimensionMismatch(PpfaError):
    """Matrix/vector dimensions are inconsistent."""


class CertificateFail(PpfaError):
    """Pivot-omission certificate failed; pivot-free LU is not justified."""


class CertificateMissing(PpfaError):
    """Secure LU requested without a pivot certificate / calibration."""


# --- solvers ---

class NearZeroPivot(PpfaError):
    """|U_ii| fell below the certified bound during elimination."""


class MaxIterExceeded(PpfaError):
    """Iterative solver did not reach the requested tolerance."""


class NotConverged(PpfaError):
    """Newton driver exhausted its iteration budget; carries diagnostics."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class UnsupportedSolver(PpfaError):
    """Unknown linear-solver name in the configuration."""
