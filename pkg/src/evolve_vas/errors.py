"""Exception hierarchy shared by every layer of the platform."""


class EvolveError(Exception):
    """Base class for all platform errors."""


class ConfigError(EvolveError):
    """Invalid configuration (profiles, ACL tables, rules, tariffs)."""


# link layer

class LinkClosed(EvolveError):
    """Traffic attempted on a closed emulated link."""


class LinkInterrupted(LinkClosed):
    """The link dropped part-way through a transfer."""

    def __init__(self, message, delivered_bytes=0):
        super().__init__(message)
        self.delivered_bytes = delivered_bytes


class BenchmarkAborted(EvolveError):
    """A benchmark stopped early; carries the samples completed so far."""

    def __init__(self, message, completed):
        super().__init__(message)
        self.completed = completed


# wire / session layer

class ProtocolError(EvolveError):
    """Malformed frame, unexpected message or bad catalog."""


class DiscoveryTimeout(EvolveError):
    """No charger answered the discovery request in time."""


class AuthenticationError(EvolveError):
    """Handshake credential or signature verification failed."""


class TransportError(EvolveError):
    """Handshake or channel failure not caused by credentials."""


class ChannelError(TransportError):
    """A sealed record failed authentication or arrived out of order."""


class SelectionError(EvolveError):
    """Unknown or unavailable service id."""


class OrderingError(EvolveError):
    """A value-added service was selected before the charging service."""


class RemoteError(EvolveError):
    """The peer answered with an error frame."""

    def __init__(self, code, message):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.remote_message = message


# event bus

class AccessDenied(EvolveError):
    def __init__(self, role, topic, action):
        super().__init__(f"role {role!r} may not {action} {topic!r}")
        self.role = role
        self.topic = topic
        self.action = action


class PayloadError(EvolveError):
    """Event payload too large or otherwise unacceptable."""


# updates

class IntegrityError(EvolveError):
    """Image bytes do not match the manifest digest."""


class SignatureError(EvolveError):
    """A publisher or party signature failed to verify."""


class FetchError(EvolveError):
    def __init__(self, message, retry_after_ms=1000.0):
        super().__init__(message)
        self.retry_after_ms = retry_after_ms


class ApplyError(EvolveError):
    """Vehicle-side verification refused an update."""


class RollbackError(EvolveError):
    """No retained image to roll back to."""


# siem

class UploadInterrupted(EvolveError):
    """Log upload stopped; resume from ``offset``."""

    def __init__(self, message, offset, upload_id):
        super().__init__(message)
        self.offset = offset
        self.upload_id = upload_id


class UnavailableError(EvolveError):
    """Requested data is neither cached nor reachable."""


# payments

class PaymentError(EvolveError):
    """Payment refused (bad signature, bad amount)."""


class PaymentStateError(EvolveError):
    """Operation not valid in the payment session's current state."""


class SequencingError(PaymentStateError):
    """Burst issued before the previous one was authorized."""


class DisputeError(EvolveError):
    """The receipt/authorization chain is broken."""

    def __init__(self, message, index, element):
        super().__init__(message)
        self.index = index
        self.element = element


# cloud

class CloudUnreachable(EvolveError):
    """The cloud endpoint cannot be reached over its link."""
