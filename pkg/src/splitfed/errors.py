"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so each class carries its own.
"""


class SplitFedError(Exception):
    exit_code = 1


class ConfigError(SplitFedError, ValueError):
    exit_code = 2


class InputError(SplitFedError, ValueError):
    exit_code = 3


class DimensionError(SplitFedError, ValueError):
    exit_code = 3


class ContractError(SplitFedError, RuntimeError):
    exit_code = 1


class AggregationError(SplitFedError, ValueError):
    exit_code = 1


class ProtocolError(SplitFedError):
    exit_code = 4


class BadMagic(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class SessionError(ProtocolError):
    """Peer went away or misbehaved in the middle of a round."""
