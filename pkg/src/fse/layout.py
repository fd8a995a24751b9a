"""Layout arithmetic for one encrypted index, plus its manifest format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .crypto import ENTRY_SIZE, SALT_SIZE, hash_bytes

HT_KEY_SIZE = 16
HT_VALUE_SIZE = 8
HT_RECORD_SIZE = HT_KEY_SIZE + HT_VALUE_SIZE
META_KEY_SIZE = 16
META_BLOCK_SIZE = 4096
META_RECORD_SIZE = META_KEY_SIZE + META_BLOCK_SIZE
FORMAT_VERSION = 1
MANIFEST_MAGIC = b"FSEM"


@dataclass(frozen=True)
class IndexParams:
    locality: int = 1
    levels: int = 8

    def __post_init__(self):
        if self.locality < 1 or self.levels < 1:
            raise ValueError("locality and stored levels must both be >= 1")


def order_of(n: int) -> int:
    """Smallest o with 2**o >= n."""
    if n < 1:
        raise ValueError("order is undefined for an empty index")
    return (n - 1).bit_length()


def level_set(n: int, s: int, locality: int) -> list[int]:
    top = order_of(n)
    step = -(-top // s) if top else 1
    levels = {max(0, top - k * step) for k in range(s)}
    if locality > 1:
        levels.add(0)
    return sorted(levels, reverse=True)


def assign_level(levels, locality: int, m: int) -> int:
    """Smallest stored level whose L buckets can hold m ids."""
    for i in sorted(levels):
        if m <= locality << i:
            return i
    raise ValueError(f"{m} ids exceed the capacity of every stored level")


def split_chunks(ids, locality: int, level: int) -> list[list[int]]:
    ids = list(ids)
    m = len(ids)
    if m > locality << level:
        raise ValueError("too many ids for this level")
    k = min(locality, m)
    if k == 0:
        return []
    q, r = divmod(m, k)
    chunks = []
    pos = 0
    for j in range(k):
        size = q + (1 if j < r else 0)
        chunks.append(ids[pos:pos + size])
        pos += size
    return chunks


def encode_location(level: int, bucket: int) -> bytes:
    return struct.pack(">II", level, bucket)


def decode_location(value: bytes) -> tuple[int, int]:
    return struct.unpack(">II", value)


def _counter(c: int) -> bytes:
    return struct.pack(">I", c)


def ht_key(t1: bytes, c: int) -> bytes:
    return hash_bytes(t1 + _counter(c))[:HT_KEY_SIZE]


def _xor8(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(8, "big")


def ht_value(t2: bytes, c: int, level: int, bucket: int) -> bytes:
    return _xor8(encode_location(level, bucket), hash_bytes(t2 + _counter(c))[:HT_VALUE_SIZE])


def ht_open(t2: bytes, c: int, value: bytes) -> tuple[int, int]:
    return decode_location(_xor8(value, hash_bytes(t2 + _counter(c))[:HT_VALUE_SIZE]))


def bucket_bytes(level: int) -> int:
    return ENTRY_SIZE << level


def ht_table_size(real_entries: int) -> int:
    """Smallest power of two holding twice the real entries."""
    size = 1
    while size < 2 * real_entries:
        size <<= 1
    return size


@dataclass
class Manifest:
    index_id: bytes
    order: int
    n: int
    locality: int
    stored_levels: int
    salt: bytes
    buckets: dict[int, int] = field(default_factory=dict)  # level -> bucket count
    ht_records: int = 0
    meta_records: int = 0
    version: int = FORMAT_VERSION

    def level_order(self) -> list[int]:
        return sorted(self.buckets, reverse=True)

    def level_size(self, level: int) -> int:
        return self.buckets[level] * bucket_bytes(level)

    @property
    def ht_size(self) -> int:
        return self.ht_records * HT_RECORD_SIZE

    @property
    def levels_size(self) -> int:
        return sum(self.level_size(i) for i in self.buckets)

    @property
    def meta_size(self) -> int:
        return self.meta_records * META_RECORD_SIZE

    def section_sizes(self) -> dict[int, int]:
        return {1: self.ht_size, 2: self.levels_size, 3: self.meta_size}

    @property
    def disk_bytes(self) -> int:
        return self.ht_size + self.levels_size + self.meta_size + len(self.to_bytes())

    def to_bytes(self) -> bytes:
        head = struct.pack(
            ">4sB16sBQII16sQIH",
            MANIFEST_MAGIC, self.version, self.index_id, self.order, self.n,
            self.locality, self.stored_levels, self.salt,
            self.ht_records, self.meta_records, len(self.buckets),
        )
        body = b"".join(struct.pack(">II", i, self.buckets[i]) for i in self.level_order())
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Manifest":
        fmt = ">4sB16sBQII16sQIH"
        hsize = struct.calcsize(fmt)
        if len(data) < hsize:
            raise ValueError("manifest truncated")
        (magic, version, index_id, order, n, loc, s, salt,
         ht_records, meta_records, nlevels) = struct.unpack(fmt, data[:hsize])
        if magic != MANIFEST_MAGIC:
            raise ValueError("bad manifest magic")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest version {version}")
        if len(data) != hsize + 8 * nlevels:
            raise ValueError("manifest length does not match its level count")
        buckets = {}
        prev = None
        for k in range(nlevels):
            i, q = struct.unpack_from(">II", data, hsize + 8 * k)
            if i > 63 or (prev is not None and i >= prev):
                raise ValueError("manifest levels must be strictly descending")
            buckets[i] = q
            prev = i
        m = cls(index_id, order, n, loc, s, salt, buckets, ht_records, meta_records, version)
        m.validate()
        return m

    def validate(self):
        if len(self.index_id) != 16 or len(self.salt) != SALT_SIZE:
            raise ValueError("bad id or salt width")
        if self.n < 1 or self.order != order_of(self.n):
            raise ValueError("manifest order does not match N")
        if self.locality < 1 or self.stored_levels < 1:
            raise ValueError("bad locality or level count")
        if self.ht_records < 1 or self.ht_records & (self.ht_records - 1):
            raise ValueError("hash table size must be a power of two")
