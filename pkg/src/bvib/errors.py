"""Exception types shared across the simulator."""


class BVIBError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(BVIBError, ValueError):
    """Bad dimensions, counts or option values."""


class NumericError(BVIBError, FloatingPointError):
    """A NaN or Inf showed up in activations, losses or gradients."""


class ProtocolError(BVIBError):
    """A split-training message does not match the state it targets."""


class AuthorizationError(BVIBError):
    """A non-leader tried to perform a leader-only action."""


class TotalFailure(BVIBError):
    """No server is alive, so no leader can be elected."""


class ParseError(BVIBError, ValueError):
    """Malformed IDX input."""
