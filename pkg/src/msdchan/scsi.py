"""SCSI command descriptor block codec for the three commands the channel uses.

Wire layouts (big-endian multi-byte fields):

    TEST UNIT READY (6 bytes):
        byte 0       opcode 0x00
        bytes 1-4    reserved (zero)
        byte 5       control

    READ(10) / WRITE(10) (10 bytes):
        byte 0       opcode 0x28 (read) / 0x2A (write)
        byte 1       reserved (zero)
        bytes 2-5    logical block address, big-endian
        byte 6       reserved (zero)
        bytes 7-8    transfer length in blocks, big-endian
        byte 9       control

Bits 6 and 7 of the control byte are vendor-specific.  Bit 7 set marks a
frame as belonging to the covert channel; bit 6 is reserved and always zero
in frames this toolkit emits.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

from .errors import InvalidTransferLength, UnknownOpcode, WrongLength

OPCODE_TEST_UNIT_READY = 0x00
OPCODE_READ_10 = 0x28
OPCODE_WRITE_10 = 0x2A

BLOCK_SIZE = 512

COVERT_BIT = 0x80      # control bit 7
RESERVED_VENDOR_BIT = 0x40  # control bit 6, never set by this toolkit


class FrameClass(enum.Enum):
    NORMAL = "normal"
    COVERT = "covert"


@dataclass(frozen=True)
class ControlByte:
    raw: int = 0

    def __post_init__(self):
        if not 0 <= self.raw <= 0xFF:
            raise ValueError(f"control byte out of range: {self.raw}")

    @property
    def vendor_bits(self) -> int:
        """Bits 6-7 as a 2-bit value."""
        return (self.raw >> 6) & 0b11

    @property
    def covert(self) -> bool:
        return bool(self.raw & COVERT_BIT)

    def with_covert_marker(self) -> "ControlByte":
        return ControlByte(self.raw | COVERT_BIT)


@dataclass(frozen=True)
class Cdb:
    """Parsed command descriptor block.

    lba and transfer_length are None for TEST UNIT READY.
    """

    opcode: int
    lba: int | None = None
    transfer_length: int | None = None
    control: ControlByte = ControlByte(0)

    @classmethod
    def test_unit_ready(cls, control: int = 0) -> "Cdb":
        return cls(OPCODE_TEST_UNIT_READY, control=ControlByte(control))

    @classmethod
    def read_10(cls, lba: int, transfer_length: int, control: int = 0) -> "Cdb":
        return cls(OPCODE_READ_10, lba, transfer_length, ControlByte(control))

    @classmethod
    def write_10(cls, lba: int, transfer_length: int, control: int = 0) -> "Cdb":
        return cls(OPCODE_WRITE_10, lba, transfer_length, ControlByte(control))

    @property
    def is_test_unit_ready(self) -> bool:
        return self.opcode == OPCODE_TEST_UNIT_READY

    @property
    def is_read(self) -> bool:
        return self.opcode == OPCODE_READ_10

    @property
    def is_write(self) -> bool:
        return self.opcode == OPCODE_WRITE_10


def parse_cdb(data: bytes) -> Cdb:
    """Decode a 6- or 10-byte CDB.

    Raises UnknownOpcode for opcodes outside the supported set and
    WrongLength when the length does not match the opcode's form.
    """
    if len(data) == 0:
        raise WrongLength(6, 0)
    opcode = data[0]
    if opcode == OPCODE_TEST_UNIT_READY:
        if len(data) != 6:
            raise WrongLength(6, len(data))
        return Cdb(opcode, control=ControlByte(data[5]))
    if opcode in (OPCODE_READ_10, OPCODE_WRITE_10):
        if len(data) != 10:
            raise WrongLength(10, len(data))
        lba, = struct.unpack_from(">I", data, 2)
        transfer_length, = struct.unpack_from(">H", data, 7)
        return Cdb(opcode, lba, transfer_length, ControlByte(data[9]))
    raise UnknownOpcode(opcode)


def serialize_cdb(cdb: Cdb) -> bytes:
    """Encode a Cdb to its wire form. Reserved bytes are zero."""
    if cdb.opcode == OPCODE_TEST_UNIT_READY:
        return bytes([OPCODE_TEST_UNIT_READY, 0, 0, 0, 0, cdb.control.raw])
    if cdb.opcode in (OPCODE_READ_10, OPCODE_WRITE_10):
        if cdb.transfer_length is None or cdb.transfer_length < 1:
            raise InvalidTransferLength(
                f"transfer_length must be >= 1, got {cdb.transfer_length}")
        if not 0 <= cdb.lba <= 0xFFFFFFFF:
            raise ValueError(f"lba out of 32-bit range: {cdb.lba}")
        if cdb.transfer_length > 0xFFFF:
            raise InvalidTransferLength(
                f"transfer_length exceeds 16 bits: {cdb.transfer_length}")
        out = bytearray(10)
        out[0] = cdb.opcode
        struct.pack_into(">I", out, 2, cdb.lba)
        struct.pack_into(">H", out, 7, cdb.transfer_length)
        out[9] = cdb.control.raw
        return bytes(out)
    raise UnknownOpcode(cdb.opcode)


def mark_covert(cdb: Cdb) -> Cdb:
    """Return an identical Cdb with control bit 7 set."""
    return replace(cdb, control=cdb.control.with_covert_marker())


def classify(cdb: Cdb) -> FrameClass:
    """Covert iff control bit 7 is set; bit 6 alone does not mark covert."""
    return FrameClass.COVERT if cdb.control.covert else FrameClass.NORMAL
