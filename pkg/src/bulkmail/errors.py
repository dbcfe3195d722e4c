"""Exception hierarchy shared by every bulkmail module."""


class BulkMailError(Exception):
    """Base class for all errors raised by this package."""


class MalformedMessage(BulkMailError):
    pass


class MalformedBulkHeader(BulkMailError):
    pass


class MissingRequiredHeader(BulkMailError):
    pass


class RelayNotOnPath(BulkMailError):
    pass


class OriginReached(BulkMailError):
    """The relay's own stamp records an authenticated local client.

    ``user`` names that client; it is the party to sanction.
    """

    def __init__(self, relay_id: str, user: str):
        super().__init__(f"{relay_id} received this message from local user {user}")
        self.relay_id = relay_id
        self.user = user


class CorruptSnapshot(BulkMailError):
    pass


class MalformedComplaint(BulkMailError):
    pass


class AccountTerminated(BulkMailError):
    pass


class ConfigError(BulkMailError):
    pass


class ScriptError(BulkMailError):
    pass


class NoRouteAccepted(BulkMailError):
    pass


class UnknownAttackKind(BulkMailError):
    pass
