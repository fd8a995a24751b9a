"""Binary framing for client/server messages.

A frame is a 32-bit big-endian length (covering opcode and payload), a one
byte opcode, then the payload.  Index bytes travel raw.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import ClassVar

MAX_FRAME = 64 * 1024 * 1024
HEADER = struct.Struct(">I")
ID_SIZE = 16
TOKEN_SIZE = 96

# frame-level error codes
OVERSIZE = 1
TRUNCATED = 2
UNKNOWN_OPCODE = 3
MALFORMED = 4
# server error codes
NOT_FOUND = 10
STALE = 11
CHECKSUM_MISMATCH = 12
DUPLICATE_ORDER = 13
BAD_UPLOAD = 14
CORRUPT = 15
INTERNAL = 16

SECTION_HT = 1
SECTION_LEVELS = 2
SECTION_META = 3


class FrameError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _need(cond: bool, what: str):
    if not cond:
        raise FrameError(MALFORMED, what)


@dataclass
class Message:
    opcode: ClassVar[int] = -1

    def payload(self) -> bytes:
        return b""

    @classmethod
    def parse(cls, payload: bytes):
        _need(not payload, f"{cls.__name__} takes no payload")
        return cls()


@dataclass
class ListIndexes(Message):
    opcode: ClassVar[int] = 1


@dataclass
class BeginUpload(Message):
    opcode: ClassVar[int] = 2
    manifest: bytes = b""

    def payload(self):
        return self.manifest

    @classmethod
    def parse(cls, payload):
        _need(len(payload) > 0, "empty manifest")
        return cls(payload)


@dataclass
class UploadPart(Message):
    opcode: ClassVar[int] = 3
    index_id: bytes = bytes(ID_SIZE)
    section: int = SECTION_HT
    offset: int = 0
    data: bytes = b""

    def payload(self):
        return self.index_id + struct.pack(">BQ", self.section, self.offset) + self.data

    @classmethod
    def parse(cls, payload):
        _need(len(payload) >= ID_SIZE + 9, "short upload part")
        section, offset = struct.unpack_from(">BQ", payload, ID_SIZE)
        _need(section in (SECTION_HT, SECTION_LEVELS, SECTION_META), "unknown section tag")
        return cls(payload[:ID_SIZE], section, offset, payload[ID_SIZE + 9:])


@dataclass
class CommitUpload(Message):
    opcode: ClassVar[int] = 4
    index_id: bytes = bytes(ID_SIZE)
    checksum: bytes = bytes(32)

    def payload(self):
        return self.index_id + self.checksum

    @classmethod
    def parse(cls, payload):
        _need(len(payload) == ID_SIZE + 32, "commit payload must be 48 bytes")
        return cls(payload[:ID_SIZE], payload[ID_SIZE:])


@dataclass
class DeleteIndex(Message):
    opcode: ClassVar[int] = 5
    index_id: bytes = bytes(ID_SIZE)

    def payload(self):
        return self.index_id

    @classmethod
    def parse(cls, payload):
        _need(len(payload) == ID_SIZE, "delete payload must be 16 bytes")
        return cls(payload)


@dataclass
class Ping(Message):
    opcode: ClassVar[int] = 6


@dataclass
class Search(Message):
    """One keyword's tokens, one (index_id, t1 || t2 || t3) pair per index."""
    opcode: ClassVar[int] = 7
    queries: list[tuple[bytes, bytes]] = field(default_factory=list)

    def payload(self):
        return struct.pack(">I", len(self.queries)) + b"".join(i + t for i, t in self.queries)

    @classmethod
    def parse(cls, payload):
        _need(len(payload) >= 4, "short search")
        (count,) = struct.unpack_from(">I", payload)
        step = ID_SIZE + TOKEN_SIZE
        _need(len(payload) == 4 + count * step, "search length does not match count")
        queries = []
        for k in range(count):
            p = 4 + k * step
            queries.append((payload[p:p + ID_SIZE], payload[p + ID_SIZE:p + step]))
        return cls(queries)


@dataclass
class GetMeta(Message):
    opcode: ClassVar[int] = 8
    index_id: bytes = bytes(ID_SIZE)
    key: bytes = bytes(16)

    def payload(self):
        return self.index_id + self.key

    @classmethod
    def parse(cls, payload):
        _need(len(payload) == ID_SIZE + 16, "get_meta payload must be 32 bytes")
        return cls(payload[:ID_SIZE], payload[ID_SIZE:])


@dataclass
class Ok(Message):
    opcode: ClassVar[int] = 0x80


@dataclass
class Listing(Message):
    opcode: ClassVar[int] = 0x81
    manifests: list[bytes] = field(default_factory=list)

    def payload(self):
        return struct.pack(">I", len(self.manifests)) + b"".join(
            struct.pack(">I", len(m)) + m for m in self.manifests)

    @classmethod
    def parse(cls, payload):
        _need(len(payload) >= 4, "short listing")
        (count,) = struct.unpack_from(">I", payload)
        pos = 4
        out = []
        for _ in range(count):
            _need(pos + 4 <= len(payload), "listing truncated")
            (size,) = struct.unpack_from(">I", payload, pos)
            pos += 4
            _need(pos + size <= len(payload), "listing entry truncated")
            out.append(payload[pos:pos + size])
            pos += size
        _need(pos == len(payload), "trailing bytes after listing")
        return cls(out)


@dataclass
class SearchResult(Message):
    opcode: ClassVar[int] = 0x82
    ids: list[int] = field(default_factory=list)

    def payload(self):
        return struct.pack(f">I{len(self.ids)}Q", len(self.ids), *self.ids)

    @classmethod
    def parse(cls, payload):
        _need(len(payload) >= 4, "short search result")
        (count,) = struct.unpack_from(">I", payload)
        _need(len(payload) == 4 + 8 * count, "result length does not match count")
        return cls(list(struct.unpack_from(f">{count}Q", payload, 4)))


@dataclass
class MetaBlock(Message):
    opcode: ClassVar[int] = 0x83
    block: bytes = b""

    def payload(self):
        return self.block

    @classmethod
    def parse(cls, payload):
        return cls(payload)


@dataclass
class Pong(Message):
    opcode: ClassVar[int] = 0x86


@dataclass
class Error(Message):
    opcode: ClassVar[int] = 0xFF
    code: int = INTERNAL
    message: str = ""

    def payload(self):
        return struct.pack(">H", self.code) + self.message.encode("utf-8")

    @classmethod
    def parse(cls, payload):
        _need(len(payload) >= 2, "short error")
        (code,) = struct.unpack_from(">H", payload)
        try:
            text = payload[2:].decode("utf-8")
        except UnicodeDecodeError:
            raise FrameError(MALFORMED, "error text is not UTF-8") from None
        return cls(code, text)


MESSAGES = {cls.opcode: cls for cls in (
    ListIndexes, BeginUpload, UploadPart, CommitUpload, DeleteIndex, Ping, Search, GetMeta,
    Ok, Listing, SearchResult, MetaBlock, Pong, Error,
)}


def encode_frame(msg: Message) -> bytes:
    body = bytes([msg.opcode]) + msg.payload()
    if len(body) > MAX_FRAME:
        raise FrameError(OVERSIZE, f"frame of {len(body)} bytes exceeds the cap")
    return HEADER.pack(len(body)) + body


def check_length(length: int):
    if length > MAX_FRAME:
        raise FrameError(OVERSIZE, f"declared frame length {length} exceeds the cap")
    if length == 0:
        raise FrameError(MALFORMED, "frame has no opcode")


def decode_body(body: bytes) -> Message:
    cls = MESSAGES.get(body[0])
    if cls is None:
        raise FrameError(UNKNOWN_OPCODE, f"unknown opcode {body[0]:#04x}")
    try:
        return cls.parse(bytes(body[1:]))
    except FrameError:
        raise
    except (struct.error, ValueError, IndexError) as exc:
        raise FrameError(MALFORMED, str(exc)) from None


def decode_frame(data: bytes) -> Message:
    """Decode exactly one frame."""
    if len(data) < HEADER.size:
        raise FrameError(TRUNCATED, "frame shorter than its header")
    (length,) = HEADER.unpack_from(data)
    check_length(length)
    if len(data) < HEADER.size + length:
        raise FrameError(TRUNCATED, "frame shorter than its declared length")
    if len(data) > HEADER.size + length:
        raise FrameError(MALFORMED, "trailing bytes after frame")
    return decode_body(data[HEADER.size:])


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            raise EOFError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> bytes:
    """Read one raw frame from a binary stream; the length is vetted before allocation."""
    head = stream.read(HEADER.size)
    if not head:
        raise EOFError("connection closed")
    if len(head) < HEADER.size:
        head += _read_exact(stream, HEADER.size - len(head))
    (length,) = HEADER.unpack(head)
    check_length(length)
    return head + _read_exact(stream, length)
