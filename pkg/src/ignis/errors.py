"""Exception hierarchy for the engine.

Everything raised on purpose derives from IgnisError so drivers can catch one
base class; transport-level failures that feed fault recovery have their own
branch so the scheduler can tell "a peer died" apart from "your code is wrong".
"""


class IgnisError(Exception):
    pass


# -- data model / formats ----------------------------------------------------

class EncodeError(IgnisError):
    """A value cannot be canonically serialized (unsupported type, I64 overflow)."""


class MalformedEncodingError(IgnisError):
    """Bad TLV bytes. Carries the byte offset of the first offending byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MalformedContainerError(IgnisError):
    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IgnisIoError(IgnisError):
    pass


class PropertyError(IgnisError):
    pass


class ResourceError(IgnisError):
    """No usable port left in the configured port list, or similar exhaustion."""


# -- transport / communicators ------------------------------------------------

class TransportError(IgnisError):
    pass


class ConnectTimeoutError(TransportError):
    def __init__(self, addr):
        super().__init__(f"cannot connect to {addr}")
        self.addr = addr


class PeerLostError(TransportError):
    def __init__(self, addr, rank=None):
        at = f" (rank {rank})" if rank is not None else ""
        super().__init__(f"peer {addr}{at} is gone")
        self.addr = addr
        self.rank = rank


class StaleEpochError(TransportError):
    """Operation attempted on a communicator that was rebuilt or destroyed."""


class CollectiveMismatchError(TransportError):
    """Members disagree on the collective being run (opcode/sequence/root)."""


class RootMismatchError(CollectiveMismatchError):
    pass


class CollectiveTimeoutError(TransportError):
    pass


class CollectiveOpError(TransportError):
    """A reduction operator failed at some member; carries the offending rank."""

    def __init__(self, rank, message):
        super().__init__(f"reduce op failed at rank {rank}: {message}")
        self.rank = rank


class SameWorkerError(IgnisError):
    pass


# -- scheduler ----------------------------------------------------------------

class SchedulerError(IgnisError):
    pass


class UnknownDependencyError(SchedulerError):
    pass


class RecoveryExhaustedError(SchedulerError):
    def __init__(self, message, cause=None):
        super().__init__(message)
        self.cause = cause


# -- driver / executor --------------------------------------------------------

class InvalidSessionError(IgnisError):
    pass


class UnknownFunctionError(IgnisError):
    pass


class ArityMismatchError(IgnisError):
    pass


class UserFnError(IgnisError):
    """A user function raised. Carries the element index and partition id."""

    def __init__(self, message, partition=None, index=None):
        where = ""
        if partition is not None:
            where = f" (partition {partition}, element {index})"
        super().__init__(message + where)
        self.partition = partition
        self.index = index


class EmptyDataframeError(IgnisError):
    pass


class NonPairElementError(IgnisError):
    pass


class ResultTooLargeError(IgnisError):
    pass


class ProtocolVersionError(IgnisError):
    pass


class RemoteError(IgnisError):
    """Engine error transported over the RPC protocol; message is the server's."""


# -- text lambdas ---------------------------------------------------------------

class LambdaSyntaxError(IgnisError):
    def __init__(self, message, line, col):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class LambdaEvalError(IgnisError):
    pass


class LambdaTypeError(LambdaEvalError):
    pass


class DivisionByZeroError(LambdaEvalError):
    pass


class UnknownVariableError(LambdaEvalError):
    pass


# -- wire mapping -----------------------------------------------------------------
#
# Executor replies and RPC responses carry errors as (kind, message) pairs;
# the kinds below keep the exception class across the process boundary. The
# scheduler treats the transport kinds as recoverable (they feed failure
# recovery); everything else is the driver program's problem.

_KINDS = {
    "peer_lost": PeerLostError,
    "connect_timeout": ConnectTimeoutError,
    "collective_timeout": CollectiveTimeoutError,
    "collective_mismatch": CollectiveMismatchError,
    "root_mismatch": RootMismatchError,
    "stale_epoch": StaleEpochError,
    "collective_op": CollectiveOpError,
    "transport": TransportError,
    "same_worker": SameWorkerError,
    "user": UserFnError,
    "non_pair": NonPairElementError,
    "empty": EmptyDataframeError,
    "io": IgnisIoError,
    "unknown_function": UnknownFunctionError,
    "arity": ArityMismatchError,
    "lambda_syntax": LambdaSyntaxError,
    "lambda_eval": LambdaEvalError,
    "malformed": MalformedEncodingError,
    "malformed_container": MalformedContainerError,
    "encode": EncodeError,
    "property": PropertyError,
    "resource": ResourceError,
    "result_too_large": ResultTooLargeError,
    "internal": IgnisError,
}

RECOVERABLE_KINDS = {
    "peer_lost", "connect_timeout", "collective_timeout", "collective_mismatch",
    "root_mismatch", "stale_epoch", "transport",
}


def error_kind(exc):
    for kind, cls in _KINDS.items():
        if type(exc) is cls:
            return kind
    for kind, cls in _KINDS.items():
        if isinstance(exc, cls):
            return kind
    return "internal"


def error_from_kind(kind, message):
    cls = _KINDS.get(kind, IgnisError)
    try:
        return cls(message)
    except TypeError:
        # classes with structured constructors degrade to the base class
        return IgnisError(f"{kind}: {message}")
