"""Exception types raised across the toolkit."""


class MsdChanError(Exception):
    """Base class for all toolkit errors."""


# --- frame codec ---

class FrameError(MsdChanError):
    pass


class UnknownOpcode(FrameError):
    def __init__(self, opcode: int):
        super().__init__(f"unsupported opcode 0x{opcode:02X}")
        self.opcode = opcode


class WrongLength(FrameError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class InvalidTransferLength(FrameError):
    pass


# --- datagrams ---

class MalformedDatagram(MsdChanError):
    pass


class OversizedPayload(MsdChanError):
    pass


# --- transport ---

class TransportError(MsdChanError):
    pass


class BadEndpoint(TransportError):
    pass


class ConnectionRefused(TransportError):
    pass


class TransportClosed(TransportError):
    pass


class TransportTimeout(TransportError):
    pass


# --- emulator ---

class QueueFull(MsdChanError):
    pass


# --- payload host ---

class SpawnFailed(MsdChanError):
    pass


class DuplicateSession(MsdChanError):
    pass


class ProcessExited(MsdChanError):
    pass


class CrcMismatch(MsdChanError):
    pass


class PathRejected(MsdChanError):
    pass


class OutOfOrderChunk(MsdChanError):
    pass


# --- console ---

class UnknownSession(MsdChanError):
    pass


class SessionClosed(MsdChanError):
    pass


class NoImplant(MsdChanError):
    pass


class TooLarge(MsdChanError):
    pass


# --- metrics ---

class ResponderUnreachable(MsdChanError):
    pass


class IncompatibleScenarios(MsdChanError):
    pass
