"""Envelope framing shared by the runtime processes.

Frame layout (little-endian)::

    b"GCR1" | version u8 | msg_type u8 | payload_len u32 | payload | crc32(payload) u32

Payloads built by :func:`pack_payload` are a u32-prefixed JSON header followed
by raw little-endian float64 arrays described in the header.
"""

from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"GCR1"
VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024
_HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = _HEADER.size
FRAME_OVERHEAD = HEADER_SIZE + 4


class MsgType(enum.IntEnum):
    TRANSITION = 1
    EPISODE_END = 2
    CHECKPOINT = 3
    REWARD_REQUEST = 4
    REWARD_RESPONSE = 5
    EXTRINSIC_REQUEST = 6
    EXTRINSIC_RESPONSE = 7
    METRICS = 8
    SHUTDOWN = 9


class ProtocolError(ValueError):
    code = 0


class BadMagic(ProtocolError):
    code = 1


class BadVersion(ProtocolError):
    code = 2


class UnknownMsgType(ProtocolError):
    code = 3


class Truncated(ProtocolError):
    code = 4


class BadCrc(ProtocolError):
    code = 5


class PayloadTooLarge(ProtocolError):
    code = 6


class TrailingData(ProtocolError):
    code = 7


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    payload: bytes = b""
    version: int = VERSION


def encode_envelope(msg: Envelope) -> bytes:
    payload = bytes(msg.payload)
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    try:
        mtype = MsgType(int(msg.msg_type))
    except ValueError as exc:
        raise UnknownMsgType(f"unknown message type {msg.msg_type}") from exc
    head = _HEADER.pack(MAGIC, msg.version, mtype, len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _parse_header(buf) -> tuple[int, MsgType, int]:
    magic, version, mtype, plen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported protocol version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError as exc:
        raise UnknownMsgType(f"unknown message type {mtype}") from exc
    if plen > MAX_PAYLOAD:
        raise PayloadTooLarge(f"declared payload of {plen} bytes exceeds {MAX_PAYLOAD}")
    return version, mtype, plen


def decode_envelope(data: bytes) -> Envelope:
    """Decode exactly one frame."""
    if len(data) < HEADER_SIZE:
        raise Truncated(f"frame of {len(data)} bytes is shorter than the header")
    version, mtype, plen = _parse_header(data)
    end = HEADER_SIZE + plen + 4
    if len(data) < end:
        raise Truncated(f"frame needs {end} bytes, got {len(data)}")
    if len(data) > end:
        raise TrailingData(f"{len(data) - end} bytes after frame")
    payload = bytes(data[HEADER_SIZE:HEADER_SIZE + plen])
    (crc,) = struct.unpack_from("<I", data, HEADER_SIZE + plen)
    if crc != zlib.crc32(payload):
        raise BadCrc("payload crc mismatch")
    return Envelope(mtype, payload, version)


class FrameReader:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_SIZE:
            _, _, plen = _parse_header(self._buf)
            end = HEADER_SIZE + plen + 4
            if len(self._buf) < end:
                break
            out.append(decode_envelope(bytes(self._buf[:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def pack_payload(header: dict, arrays: dict[str, np.ndarray] | None = None) -> bytes:
    arrays = arrays or {}
    meta = dict(header)
    meta["_arrays"] = [[k, list(np.shape(v))] for k, v in arrays.items()]
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return struct.pack("<I", len(raw)) + raw + body


def unpack_payload(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(payload) < 4:
        raise Truncated("payload too short for its header")
    (n,) = struct.unpack_from("<I", payload, 0)
    if 4 + n > len(payload):
        raise Truncated("payload header overruns payload")
    meta = json.loads(payload[4:4 + n].decode("utf-8"))
    pos = 4 + n
    arrays = {}
    for name, shape in meta.pop("_arrays", []):
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(payload):
            raise Truncated(f"array {name!r} overruns payload")
        arrays[name] = np.frombuffer(payload[pos:pos + size], dtype="<f8").astype(np.float64).reshape(shape)
        pos += size
    if pos != len(payload):
        raise TrailingData(f"{len(payload) - pos} unexplained payload bytes")
    return meta, arrays


def message(msg_type: MsgType, header: dict | None = None, arrays=None) -> bytes:
    return encode_envelope(Envelope(msg_type, pack_payload(header or {}, arrays)))
