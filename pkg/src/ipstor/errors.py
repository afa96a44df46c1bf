"""Exception hierarchy shared by every layer of the stack."""


class IpstorError(Exception):
    pass


class ProtocolError(IpstorError):
    """Malformed or out-of-sequence wire data."""


class Incomplete(IpstorError):
    """Not enough bytes buffered yet; not fatal.

    ``needed`` is the total number of bytes required to make progress.
    """

    def __init__(self, needed):
        super().__init__(f"need {needed} bytes")
        self.needed = needed


class IntegrityError(IpstorError):
    """Authentication of a sealed record or packet failed."""


class ReplayError(IpstorError):
    """A packet sequence number did not strictly increase."""


class HandshakeError(IpstorError):
    pass


class AuthFailure(IpstorError):
    """CHAP authentication was rejected."""


class LoginError(IpstorError):
    """Login rejected for a reason other than authentication."""

    def __init__(self, message, status_class=None, status_detail=None):
        super().__init__(message)
        self.status_class = status_class
        self.status_detail = status_detail


class StorageError(IpstorError):
    """A SCSI command completed with a non-GOOD status."""

    def __init__(self, status, sense=b""):
        super().__init__(f"SCSI status 0x{status:02x}")
        self.status = status
        self.sense = sense


class TransportError(IpstorError):
    pass


class UsageError(IpstorError):
    pass


class StartupError(IpstorError):
    pass


class ConfigError(IpstorError):
    pass


class AnalysisError(IpstorError):
    pass
