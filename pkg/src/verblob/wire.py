"""Length-prefixed binary frames and the field encoding used in payloads.

Frame layout::

    +-----------+--------+----------------+-----------+
    | length u32| opcode | request_id u64 | payload   |
    +-----------+--------+----------------+-----------+

``length`` counts everything after itself, so it is ``9 + len(payload)``.
All integers are big-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

from verblob.errors import MalformedFrame

HEADER = struct.Struct(">IBQ")
HEADER_SIZE = HEADER.size  # 13
LENGTH_SIZE = 4
MIN_FRAME_LENGTH = 9
MAX_FRAME_LENGTH = 64 * 1024 * 1024


class Opcode(IntEnum):
    ECHO = 0x01
    KV_PUT = 0x10
    KV_GET = 0x11
    PAGE_STORE = 0x20
    PAGE_FETCH = 0x21
    PAGE_STATS = 0x22
    PM_REGISTER = 0x30
    PM_HEARTBEAT = 0x31
    PM_LIST = 0x32
    VM_CREATE = 0x40
    VM_LATEST = 0x41
    VM_BEGIN = 0x42
    VM_REQUEST = 0x43
    VM_COMPLETE = 0x44
    VM_ABORT = 0x45
    ERROR = 0xFF


class Endpoint(NamedTuple):
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> Endpoint:
        host, _, port = text.rpartition(":")
        return cls(host, int(port))


@dataclass(frozen=True)
class Message:
    opcode: int
    request_id: int
    payload: bytes = b""


def encode_frame(msg: Message) -> bytes:
    if len(msg.payload) + MIN_FRAME_LENGTH > MAX_FRAME_LENGTH:
        raise MalformedFrame(f"payload of {len(msg.payload)} bytes exceeds frame limit")
    return HEADER.pack(MIN_FRAME_LENGTH + len(msg.payload), msg.opcode, msg.request_id) + msg.payload


def decode_frame(data: bytes) -> Message:
    """Decode exactly one frame; trailing or missing bytes are an error."""
    if len(data) < HEADER_SIZE:
        raise MalformedFrame(f"frame shorter than header ({len(data)} bytes)")
    length, opcode, request_id = HEADER.unpack_from(data)
    if length < MIN_FRAME_LENGTH or length > MAX_FRAME_LENGTH:
        raise MalformedFrame(f"bad frame length {length}")
    if LENGTH_SIZE + length != len(data):
        raise MalformedFrame(f"frame length {length} does not match {len(data)} bytes")
    return Message(opcode, request_id, bytes(data[HEADER_SIZE:]))


class FrameDecoder:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self, max_length: int = MAX_FRAME_LENGTH) -> None:
        self._buf = bytearray()
        self._max = max_length

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        pos = 0
        buf = self._buf
        while len(buf) - pos >= HEADER_SIZE:
            length, opcode, request_id = HEADER.unpack_from(buf, pos)
            if length < MIN_FRAME_LENGTH or length > self._max:
                raise MalformedFrame(f"bad frame length {length}")
            end = pos + LENGTH_SIZE + length
            if end > len(buf):
                break
            out.append(Message(opcode, request_id, bytes(buf[pos + HEADER_SIZE:end])))
            pos = end
        if pos:
            del buf[:pos]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)


_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_F64 = struct.Struct(">d")


class Packer:
    """Builds a payload field by field."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> Packer:
        self._parts.append(_U8.pack(v))
        return self

    def u16(self, v: int) -> Packer:
        self._parts.append(_U16.pack(v))
        return self

    def u32(self, v: int) -> Packer:
        self._parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> Packer:
        self._parts.append(_U64.pack(v))
        return self

    def f64(self, v: float) -> Packer:
        self._parts.append(_F64.pack(v))
        return self

    def raw(self, b: bytes) -> Packer:
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes) -> Packer:
        self._parts.append(_U32.pack(len(b)))
        self._parts.append(bytes(b))
        return self

    def text(self, s: str) -> Packer:
        data = s.encode("utf-8")
        self._parts.append(_U16.pack(len(data)))
        self._parts.append(data)
        return self

    def endpoint(self, ep: Endpoint) -> Packer:
        return self.text(ep.host).u16(ep.port)

    def bytes(self) -> bytes:
        return b"".join(self._parts)


class Unpacker:
    """Reads fields back; any shortfall or leftover raises MalformedFrame."""

    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        end = self._pos + n
        if end > len(self._data):
            raise MalformedFrame("payload truncated")
        view = self._data[self._pos:end]
        self._pos = end
        return view

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def blob(self) -> bytes:
        return bytes(self._take(self.u32()))

    def text(self) -> str:
        try:
            return bytes(self._take(self.u16())).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame("invalid utf-8 in payload") from exc

    def endpoint(self) -> Endpoint:
        return Endpoint(self.text(), self.u16())

    def done(self) -> None:
        if self._pos != len(self._data):
            raise MalformedFrame(f"{len(self._data) - self._pos} trailing payload bytes")


def encode_error(exc: BaseException) -> bytes:
    return Packer().text(type(exc).__name__).text(str(exc)[:4096]).bytes()


def decode_error(payload: bytes) -> tuple[str, str]:
    u = Unpacker(payload)
    name, message = u.text(), u.text()
    u.done()
    return name, message
