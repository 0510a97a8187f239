"""Covert-channel message framing.

A datagram is an 8-byte header followed by up to 504 bytes of payload, so a
single datagram never exceeds one 512-byte block:

    byte 0      version (0x01)
    byte 1      type
    bytes 2-3   session id, big-endian
    bytes 4-5   sequence number, big-endian (per session, wraps mod 2^16)
    bytes 6-7   payload length, big-endian
    bytes 8..   payload

Datagrams are laid back-to-back inside the data phase of a covert READ or
WRITE exchange; the remainder of the buffer is zero-filled.  A zero byte in
the type position (PAD) terminates unpacking, so the zero fill is
self-delimiting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

from .errors import MalformedDatagram, OversizedPayload
from .scsi import BLOCK_SIZE

VERSION = 1
HEADER_LEN = 8
MAX_PAYLOAD = BLOCK_SIZE - HEADER_LEN  # 504


class DatagramType(IntEnum):
    PAD = 0x00
    OPEN = 0x01
    DATA = 0x02
    CLOSE = 0x03
    FILE_BEGIN = 0x04
    FILE_CHUNK = 0x05
    FILE_END = 0x06
    ERROR = 0x07


@dataclass(frozen=True)
class Datagram:
    dtype: DatagramType
    session_id: int
    seq: int
    payload: bytes = b""

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise OversizedPayload(
                f"payload {len(self.payload)} exceeds {MAX_PAYLOAD} bytes")
        if self.dtype == DatagramType.PAD and self.payload:
            raise MalformedDatagram("PAD datagram must not carry a payload")
        if not 0 <= self.session_id <= 0xFFFF:
            raise ValueError(f"session_id out of range: {self.session_id}")
        if not 0 <= self.seq <= 0xFFFF:
            raise ValueError(f"seq out of range: {self.seq}")

    @property
    def wire_size(self) -> int:
        return HEADER_LEN + len(self.payload)


def encode(d: Datagram) -> bytes:
    return struct.pack(">BBHHH", VERSION, d.dtype, d.session_id, d.seq,
                       len(d.payload)) + d.payload


def decode_stream(buf: bytes) -> list[Datagram]:
    """Unpack back-to-back datagrams, stopping at the first PAD type byte
    or when fewer than a full header remains."""
    out: list[Datagram] = []
    pos = 0
    while pos + HEADER_LEN <= len(buf):
        version, dtype, session_id, seq, length = struct.unpack_from(
            ">BBHHH", buf, pos)
        if dtype == DatagramType.PAD:
            break
        if version != VERSION:
            raise MalformedDatagram(f"bad version {version} at offset {pos}")
        try:
            dt = DatagramType(dtype)
        except ValueError:
            raise MalformedDatagram(f"unknown type 0x{dtype:02X} at offset {pos}")
        if length > MAX_PAYLOAD:
            raise MalformedDatagram(f"length {length} exceeds {MAX_PAYLOAD}")
        if pos + HEADER_LEN + length > len(buf):
            raise MalformedDatagram(
                f"length {length} exceeds remaining buffer at offset {pos}")
        payload = buf[pos + HEADER_LEN:pos + HEADER_LEN + length]
        out.append(Datagram(dt, session_id, seq, payload))
        pos += HEADER_LEN + length
    return out


def pack_blocks(datagrams: Iterable[Datagram], capacity_bytes: int) -> bytes:
    """Pack datagrams back-to-back and zero-fill to capacity_bytes.

    capacity_bytes must be a multiple of the block size and large enough to
    hold every datagram.
    """
    if capacity_bytes % BLOCK_SIZE != 0:
        raise ValueError("capacity must be a whole number of blocks")
    body = b"".join(encode(d) for d in datagrams)
    if len(body) > capacity_bytes:
        raise ValueError(
            f"datagrams ({len(body)} bytes) exceed capacity {capacity_bytes}")
    return body + bytes(capacity_bytes - len(body))


def blocks_needed(datagrams: Iterable[Datagram]) -> int:
    """Minimal number of 512-byte blocks holding the given datagrams."""
    total = sum(d.wire_size for d in datagrams)
    return max(1, -(-total // BLOCK_SIZE))


def chunk_payload(data: bytes) -> list[bytes]:
    """Split a byte string into maximal datagram payloads (504 bytes each)."""
    if not data:
        return []
    return [data[i:i + MAX_PAYLOAD] for i in range(0, len(data), MAX_PAYLOAD)]
