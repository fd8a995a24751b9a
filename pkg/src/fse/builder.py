"""Client-side index construction and the order-keyed update procedure."""

from __future__ import annotations

import hashlib
import logging
import math
import os
import random
import re
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import crypto
from .crypto import ENTRY_SIZE, IndexKeys
from .layout import (
    HT_RECORD_SIZE, META_BLOCK_SIZE, META_KEY_SIZE, IndexParams, Manifest,
    assign_level, ht_key, ht_table_size, ht_value, level_set, order_of, split_chunks,
)

log = logging.getLogger(__name__)

MAX_WORD = 64
MIN_WORD = 2
DELTA_WORDS_PER_BLOCK = 100
DELTA_AREA = 4064
_DELTA_TAG = b"\x00DELTA"
_TOKEN_RE = re.compile(rb"[a-z0-9]+")


class BuildError(Exception):
    pass


def tokenize(document: bytes, stopwords=frozenset()) -> set[bytes]:
    words = {
        w for w in _TOKEN_RE.findall(document.lower())
        if MIN_WORD <= len(w) <= MAX_WORD
    }
    return words - stopwords if stopwords else words


def valid_word(word: bytes) -> bool:
    return 0 < len(word) <= MAX_WORD and min(word) >= 0x20


@dataclass
class PlainIndex:
    postings: dict[bytes, set[int]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return sum(len(ids) for ids in self.postings.values())

    @property
    def delta(self) -> list[bytes]:
        return sorted(self.postings)

    def add(self, word: bytes, ids: Iterable[int]):
        if not valid_word(word):
            raise BuildError(f"invalid index word {word!r}")
        ids = set(ids)
        if ids:
            self.postings.setdefault(word, set()).update(ids)

    def merge(self, other: "PlainIndex"):
        for w, ids in other.postings.items():
            self.add(w, ids)

    def tuples(self) -> set[tuple[bytes, int]]:
        return {(w, i) for w, ids in self.postings.items() for i in ids}


def build_plain_index(docs, stopwords=frozenset(), vocabulary=None) -> PlainIndex:
    """Invert (doc_id, content) pairs, optionally keeping only words in vocabulary."""
    plain = PlainIndex()
    seen = set()
    for doc_id, content in docs:
        if doc_id in seen:
            raise BuildError(f"duplicate document id {doc_id:#x}")
        seen.add(doc_id)
        words = tokenize(content, stopwords)
        if vocabulary is not None:
            words &= vocabulary
        for w in words:
            plain.postings.setdefault(w, set()).add(doc_id)
    return plain


@dataclass
class EncryptedIndex:
    manifest: Manifest
    ht: bytes
    levels: dict[int, bytes]
    meta: bytes

    @property
    def level_data(self) -> bytes:
        return b"".join(self.levels[i] for i in self.manifest.level_order())

    def sections(self) -> dict[int, bytes]:
        return {1: self.ht, 2: self.level_data, 3: self.meta}

    def checksum(self) -> bytes:
        h = hashlib.sha256()
        for tag in (1, 2, 3):
            h.update(self.sections()[tag])
        return h.digest()

    def serialized(self) -> bytes:
        return self.manifest.to_bytes() + self.ht + self.level_data + self.meta


class _Fenwick:
    def __init__(self, size: int):
        self.size = size
        self.tree = [0] * (size + 1)

    def add(self, i: int, delta: int):
        i += 1
        while i <= self.size:
            self.tree[i] += delta
            i += i & -i

    def prefix(self, i: int) -> int:
        """Sum of entries [0, i)."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s

    def find(self, target: int) -> int:
        """Smallest index j with prefix(j + 1) > target."""
        pos = 0
        step = 1 << self.size.bit_length()
        while step:
            nxt = pos + step
            if nxt <= self.size and self.tree[nxt] <= target:
                pos = nxt
                target -= self.tree[nxt]
            step >>= 1
        return pos


class _LevelBuckets:
    """Buckets of one level, grouped by free-slot count for uniform random picks."""

    def __init__(self, capacity: int, count: int):
        self.capacity = capacity
        self.free: list[int] = []
        self.classes: list[list[int]] = [[] for _ in range(capacity + 1)]
        self.where: list[int] = []
        self.counts = _Fenwick(capacity + 1)
        for _ in range(count):
            self._append()

    def _append(self) -> int:
        x = len(self.free)
        self.free.append(self.capacity)
        self.where.append(0)
        self._enter(x, self.capacity)
        return x

    def _enter(self, x: int, f: int):
        cls = self.classes[f]
        self.where[x] = len(cls)
        cls.append(x)
        self.counts.add(f, 1)

    def _leave(self, x: int, f: int):
        cls = self.classes[f]
        j = self.where[x]
        last = cls.pop()
        if last != x:
            cls[j] = last
            self.where[last] = j
        self.counts.add(f, -1)

    def place(self, size: int, rng) -> int:
        below = self.counts.prefix(size)
        eligible = self.counts.prefix(self.capacity + 1) - below
        if eligible == 0:
            x = self._append()
        else:
            r = rng.randrange(eligible)
            f = self.counts.find(below + r)
            offset = below + r - self.counts.prefix(f)
            x = self.classes[f][offset]
        f = self.free[x]
        self._leave(x, f)
        self.free[x] = f - size
        self._enter(x, f - size)
        return x


def _delta_tag(b: int) -> bytes:
    return _DELTA_TAG + struct.pack(">Q", b)


def _delta_key(keys: IndexKeys, b: int) -> bytes:
    return crypto.hash_bytes(crypto.prf(keys.k1, _delta_tag(b)))[:META_KEY_SIZE]


def _delta_cipher_key(keys: IndexKeys, b: int) -> bytes:
    return crypto.hash_bytes(crypto.prf(keys.k3, _delta_tag(b)))


def serialize_delta_blocks(keys: IndexKeys, delta) -> list[tuple[bytes, bytes]]:
    """Encrypt the sorted dictionary into 4096-byte blocks keyed for later probing."""
    blocks: list[list[bytes]] = [[]]
    used = 0
    for w in sorted(delta):
        if not valid_word(w):
            raise BuildError(f"invalid dictionary word {w!r}")
        need = 2 + len(w)
        cur = blocks[-1]
        if len(cur) == DELTA_WORDS_PER_BLOCK or used + need > DELTA_AREA:
            blocks.append([])
            used = 0
        blocks[-1].append(w)
        used += need
    out = []
    for b, words in enumerate(blocks):
        if not words:
            continue
        area = b"".join(struct.pack(">H", len(w)) + w for w in words)
        plaintext = area.ljust(DELTA_AREA, b"\x00") + bytes(crypto.PAD_SIZE)
        sealed = crypto.seal(_delta_cipher_key(keys, b), plaintext)
        assert len(sealed) == META_BLOCK_SIZE
        out.append((_delta_key(keys, b), sealed))
    return out


def recover_delta(keys: IndexKeys, fetch: Callable[[bytes], Optional[bytes]]) -> list[bytes]:
    words = []
    b = 0
    while True:
        block = fetch(_delta_key(keys, b))
        if block is None:
            return words
        pt = crypto.unseal(_delta_cipher_key(keys, b), block)
        if pt[DELTA_AREA:] != bytes(crypto.PAD_SIZE):
            raise BuildError(f"dictionary block {b} failed its validity check")
        pos = 0
        while pos + 2 <= DELTA_AREA:
            (size,) = struct.unpack_from(">H", pt, pos)
            if size == 0:
                break
            words.append(pt[pos + 2:pos + 2 + size])
            pos += 2 + size
        b += 1


def setup(keys: IndexKeys, plain: PlainIndex, params: IndexParams, rng=None,
          salt: Optional[bytes] = None, index_id: Optional[bytes] = None) -> EncryptedIndex:
    n = plain.n
    if n < 1:
        raise BuildError("cannot build an index with no tuples")
    rng = rng or random.SystemRandom()
    salt = salt if salt is not None else crypto.new_salt()
    index_id = index_id if index_id is not None else os.urandom(16)
    L = params.locality
    levels = level_set(n, params.levels, L)

    words = plain.delta
    rng.shuffle(words)
    assigned = []
    demand = dict.fromkeys(levels, 0)
    for w in words:
        ids = sorted(plain.postings[w])
        i = assign_level(levels, L, len(ids))
        assigned.append((w, i, split_chunks(ids, L, i)))
        demand[i] += len(ids)

    space = {i: _LevelBuckets(1 << i, math.ceil(1.25 * demand[i] / (1 << i))) for i in levels}
    # bucket -> list of (word index, chunk)
    contents: dict[tuple[int, int], list[tuple[int, list[int]]]] = {}
    records = []
    for wi, (w, i, chunks) in enumerate(assigned):
        tok = crypto.make_token(keys, w)
        for c, chunk in enumerate(chunks, start=1):
            x = space[i].place(len(chunk), rng)
            contents.setdefault((i, x), []).append((wi, chunk))
            records.append(ht_key(tok.t1, c) + ht_value(tok.t2, c, i, x))

    arrays = {}
    for i in levels:
        q = len(space[i].free)
        raw = np.frombuffer(crypto.random_filler(q << i), dtype=np.uint8).copy()
        arrays[i] = raw.reshape(q, 1 << i, ENTRY_SIZE)
    word_keys = {}
    for (i, x), pieces in contents.items():
        total = sum(len(ch) for _, ch in pieces)
        slots = rng.sample(range(1 << i), total)
        pos = 0
        for wi, chunk in pieces:
            w = assigned[wi][0]
            wk = word_keys.get(w)
            if wk is None:
                wk = word_keys[w] = crypto.entry_key(crypto.prf(keys.k3, w))
            arrays[i][x, slots[pos:pos + len(chunk)]] = crypto.encrypt_entries(wk, chunk)
            pos += len(chunk)

    size = ht_table_size(len(records))
    filler = os.urandom(HT_RECORD_SIZE * (size - len(records)))
    records.extend(filler[k:k + HT_RECORD_SIZE] for k in range(0, len(filler), HT_RECORD_SIZE))
    records.sort()
    meta = serialize_delta_blocks(keys, plain.postings)
    meta.sort()
    manifest = Manifest(
        index_id=index_id, order=order_of(n), n=n, locality=L,
        stored_levels=params.levels, salt=salt,
        buckets={i: arrays[i].shape[0] for i in levels},
        ht_records=size, meta_records=len(meta),
    )
    return EncryptedIndex(
        manifest=manifest,
        ht=b"".join(records),
        levels={i: arrays[i].tobytes() for i in levels},
        meta=b"".join(k + v for k, v in meta),
    )


@dataclass
class MergePlan:
    absorbed: list[int]
    final_order: int
    final_n: int


def plan_update(existing_orders, incoming_n: int, per_order_n: dict[int, int]) -> MergePlan:
    """Simulate the collision cascade for a batch of incoming_n tuples."""
    remaining = set(existing_orders)
    n = incoming_n
    o = order_of(n)
    absorbed = []
    while o in remaining:
        remaining.discard(o)
        absorbed.append(o)
        n += per_order_n[o]
        o = order_of(n)
    return MergePlan(absorbed, o, n)


@dataclass
class UpdateResult:
    docs_added: int = 0
    words_added: int = 0
    tuples_added: int = 0
    merged_orders: list[int] = field(default_factory=list)
    merged_words: int = 0
    merged_tuples: int = 0
    final_order: Optional[int] = None
    manifest: Optional[Manifest] = None


def download_index(session, master: bytes, manifest: Manifest) -> PlainIndex:
    """Rebuild an index's postings through its dictionary and the normal search path."""
    keys = crypto.derive_index_keys(master, manifest.salt)
    words = recover_delta(keys, lambda k: session.get_meta(manifest.index_id, k))
    plain = PlainIndex()
    for w in words:
        ids = session.search([(manifest.index_id, crypto.make_token(keys, w))])
        plain.add(w, ids)
    return plain


def index_gen(master: bytes, new_docs, session, params: IndexParams, rng=None,
              stopwords=frozenset()) -> UpdateResult:
    docs = list(new_docs)
    plain = build_plain_index(docs, stopwords)
    result = UpdateResult(docs_added=len(docs), words_added=len(plain.postings), tuples_added=plain.n)
    if plain.n == 0:
        return result
    by_order = {m.order: m for m in session.list_indexes()}
    absorbed = []
    o = order_of(plain.n)
    while o in by_order:
        m = by_order.pop(o)
        part = download_index(session, master, m)
        log.info("absorbing order %d index (%d words, %d tuples)", m.order, len(part.postings), part.n)
        result.merged_words += len(part.postings)
        result.merged_tuples += part.n
        plain.merge(part)
        absorbed.append(m)
        o = order_of(plain.n)

    salt = crypto.new_salt()
    built = setup(crypto.derive_index_keys(master, salt), plain, params, rng, salt)
    # New index first so searchers never lose results; only an absorbed index of
    # the same order (possible when batches repeat tuples) must go before commit.
    for m in absorbed:
        if m.order == built.manifest.order:
            session.delete(m.index_id)
    session.upload(built)
    for m in absorbed:
        if m.order != built.manifest.order:
            session.delete(m.index_id)
    result.merged_orders = [m.order for m in absorbed]
    result.final_order = built.manifest.order
    result.manifest = built.manifest
    return result
