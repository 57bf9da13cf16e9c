"""Kernel error hierarchy.

Every failure the kernel reports to callers is a ``KernelError`` subclass.
``http_status`` is the status the HTTP edge maps the error to; admin API
handlers reuse the same mapping.
"""

from __future__ import annotations


class KernelError(Exception):
    http_status = 500

    @property
    def code(self) -> str:
        return type(self).__name__


# -- configuration / boot ---------------------------------------------------

class InvalidConfig(KernelError):
    http_status = 400

    def __init__(self, field: str, reason: str = ""):
        super().__init__(f"invalid config field {field!r}" + (f": {reason}" if reason else ""))
        self.field = field


class AddrInUse(KernelError):
    http_status = 409

    def __init__(self, addr: str):
        super().__init__(f"address already in use: {addr}")
        self.addr = addr


# -- registry ---------------------------------------------------------------

class DuplicateId(KernelError):
    http_status = 409


class RouteCollision(KernelError):
    http_status = 409

    def __init__(self, method: str, prefix: str):
        super().__init__(f"route already claimed: {method} {prefix}")
        self.method = method
        self.prefix = prefix


class InvalidDescriptor(KernelError):
    http_status = 400


class UnknownModule(KernelError):
    http_status = 404


class ProtectedModule(KernelError):
    """Kernel servers cannot be unregistered or evicted."""

    http_status = 403


class IllegalTransition(KernelError):
    def __init__(self, instance_id: str, src, dst):
        super().__init__(f"instance {instance_id}: illegal transition {src.name} -> {dst.name}")
        self.src = src
        self.dst = dst


# -- dispatcher -------------------------------------------------------------

class NoRoute(KernelError):
    http_status = 404


class NoReadyInstance(KernelError):
    http_status = 503


class UpstreamTimeout(KernelError):
    http_status = 504


class QuotaExceeded(KernelError):
    http_status = 429


# -- ISC --------------------------------------------------------------------

class BodyTooLarge(KernelError):
    http_status = 413


class Truncated(KernelError):
    http_status = 400


class LengthMismatch(KernelError):
    http_status = 400


class MalformedJson(KernelError):
    http_status = 400


class UnknownKind(KernelError):
    http_status = 400


class InvalidEnvelope(KernelError):
    http_status = 400


class UnknownDestination(KernelError):
    http_status = 404


class Exhausted(KernelError):
    http_status = 502

    def __init__(self, attempts: int, cause: BaseException | str):
        super().__init__(f"all {attempts} attempts failed; last cause: {cause}")
        self.attempts = attempts
        self.cause = cause


class QueueFull(KernelError):
    http_status = 429


# -- scheduler --------------------------------------------------------------

class InvalidTask(KernelError):
    http_status = 400


class EmptyQueue(KernelError):
    http_status = 404


class UnknownTask(KernelError):
    http_status = 404


class AlreadyDone(KernelError):
    http_status = 409


# -- service manager --------------------------------------------------------

class VersionNotNewer(KernelError):
    http_status = 409


class StartFailure(KernelError):
    http_status = 502


class StartTimeout(KernelError):
    http_status = 504


class NothingToRollBackTo(KernelError):
    http_status = 409


class AboveMax(KernelError):
    http_status = 400


class InvalidReplicas(KernelError):
    http_status = 400


# -- monitor ----------------------------------------------------------------

class BadRange(KernelError):
    http_status = 400


# -- MAPE-K -----------------------------------------------------------------

class NoData(KernelError):
    http_status = 404


class NoViableAction(KernelError):
    http_status = 409


class ActionFailed(KernelError):
    http_status = 502

    def __init__(self, cause: str):
        super().__init__(f"healing action failed: {cause}")
        self.cause = cause


# -- kernel servers ---------------------------------------------------------

class NotFound(KernelError):
    http_status = 404


class Expired(KernelError):
    http_status = 410


class BadCredentials(KernelError):
    http_status = 401


class RateLimited(KernelError):
    http_status = 429


class BadSignature(KernelError):
    http_status = 401


class ExpiredToken(KernelError):
    http_status = 401


class Malformed(KernelError):
    http_status = 400


class UnknownRuleSet(KernelError):
    http_status = 404


class ConflictingOpts(KernelError):
    http_status = 400


# -- CLI / bench ------------------------------------------------------------

class UnsupportedFault(KernelError):
    http_status = 400


class BenchFailed(KernelError):
    http_status = 500
