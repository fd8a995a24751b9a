"""Deterministic primitives: PRF, hash, entry encryption and token derivation.

F is HMAC-SHA-256, H is SHA-256 and Enc is AES-256-CTR with an explicit
16-byte nonce prepended to the ciphertext.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

KEY_SIZE = 32
SALT_SIZE = 16
NONCE_SIZE = 16
PAD_SIZE = 16  # validity pad, 128 bits of zeros
ID_SIZE = 8
BODY_SIZE = ID_SIZE + PAD_SIZE
ENTRY_SIZE = NONCE_SIZE + BODY_SIZE  # 40

_ZERO_PAD = bytes(PAD_SIZE)
_KEY_LABEL = b"\x6b"


@dataclass(frozen=True)
class IndexKeys:
    k1: bytes
    k2: bytes
    k3: bytes

    def __repr__(self):
        return "IndexKeys(<redacted>)"


@dataclass(frozen=True)
class SearchToken:
    t1: bytes
    t2: bytes
    t3: bytes

    def to_bytes(self) -> bytes:
        return self.t1 + self.t2 + self.t3

    @classmethod
    def from_bytes(cls, data: bytes) -> "SearchToken":
        if len(data) != 3 * KEY_SIZE:
            raise ValueError("search token must be 96 bytes")
        return cls(data[:32], data[32:64], data[64:])


def generate_master_key() -> bytes:
    return os.urandom(KEY_SIZE)


def new_salt() -> bytes:
    return os.urandom(SALT_SIZE)


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def prf(key: bytes, data: bytes) -> bytes:
    if len(key) != KEY_SIZE:
        raise ValueError("PRF key must be 32 bytes")
    return hmac_sha256(key, data)


def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive_index_keys(master: bytes, salt: bytes) -> IndexKeys:
    """Derive the per-index key triple from the master key and a public salt."""
    if len(salt) != SALT_SIZE:
        raise ValueError("salt must be 16 bytes")
    k1, k2, k3 = (prf(master, _KEY_LABEL + bytes([i]) + salt) for i in (1, 2, 3))
    return IndexKeys(k1, k2, k3)


def make_token(keys: IndexKeys, word: bytes) -> SearchToken:
    if not word:
        raise ValueError("cannot make a token for an empty word")
    return SearchToken(prf(keys.k1, word), prf(keys.k2, word), prf(keys.k3, word))


def entry_key(t3: bytes) -> bytes:
    """Symmetric key for a word's entries, computable from the token alone."""
    return hash_bytes(t3)


def _ctr(key: bytes, nonce: bytes, data: bytes) -> bytes:
    c = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return c.update(data) + c.finalize()


def encrypt_entry(word_key: bytes, doc_id: int) -> bytes:
    nonce = os.urandom(NONCE_SIZE)
    return nonce + _ctr(word_key, nonce, struct.pack(">Q", doc_id) + _ZERO_PAD)


def decrypt_entry(word_key: bytes, ct: bytes) -> Optional[int]:
    """Return the document id, or None when the pad check fails (wrong key or filler)."""
    if len(ct) != ENTRY_SIZE:
        raise ValueError("entry ciphertext must be 40 bytes")
    pt = _ctr(word_key, ct[:NONCE_SIZE], ct[NONCE_SIZE:])
    if pt[ID_SIZE:] != _ZERO_PAD:
        return None
    return struct.unpack(">Q", pt[:ID_SIZE])[0]


def random_filler(count: int = 1) -> bytes:
    return os.urandom(ENTRY_SIZE * count)


# Batched CTR. The body is 24 bytes so every entry consumes exactly two
# keystream blocks, AES(nonce) and AES(nonce + 1 mod 2^128); both are produced
# for a whole bucket with one ECB pass.

def _keystream(key: bytes, nonces: np.ndarray) -> np.ndarray:
    n = nonces.shape[0]
    words = nonces.view(">u8").reshape(n, 2)
    hi = words[:, 0].astype(np.uint64)
    lo = words[:, 1].astype(np.uint64)
    lo1 = lo + np.uint64(1)
    hi1 = hi + (lo1 == 0).astype(np.uint64)
    nxt = np.empty((n, 2), dtype=">u8")
    nxt[:, 0] = hi1
    nxt[:, 1] = lo1
    blocks = np.empty((n, 2, 16), dtype=np.uint8)
    blocks[:, 0, :] = nonces
    blocks[:, 1, :] = nxt.view(np.uint8).reshape(n, 16)
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    ks = enc.update(blocks.tobytes()) + enc.finalize()
    return np.frombuffer(ks, dtype=np.uint8).reshape(n, 32)[:, :BODY_SIZE]


def encrypt_entries(word_key: bytes, doc_ids) -> np.ndarray:
    """Encrypt many ids under one word key; returns an (n, 40) uint8 array."""
    ids = np.asarray(list(doc_ids), dtype=np.uint64)
    n = ids.shape[0]
    out = np.empty((n, ENTRY_SIZE), dtype=np.uint8)
    if n == 0:
        return out
    out[:, :NONCE_SIZE] = np.frombuffer(os.urandom(NONCE_SIZE * n), dtype=np.uint8).reshape(n, NONCE_SIZE)
    pt = np.zeros((n, BODY_SIZE), dtype=np.uint8)
    pt[:, :ID_SIZE] = ids.astype(">u8").view(np.uint8).reshape(n, ID_SIZE)
    out[:, NONCE_SIZE:] = pt ^ _keystream(word_key, np.ascontiguousarray(out[:, :NONCE_SIZE]))
    return out


def decrypt_entries(word_key: bytes, blob) -> list:
    """Decrypt a run of 40-byte entries and return the ids that pass the pad check."""
    arr = np.frombuffer(blob, dtype=np.uint8)
    if arr.size % ENTRY_SIZE:
        raise ValueError("entry blob length must be a multiple of 40")
    arr = arr.reshape(-1, ENTRY_SIZE)
    if arr.shape[0] == 0:
        return []
    pt = arr[:, NONCE_SIZE:] ^ _keystream(word_key, np.ascontiguousarray(arr[:, :NONCE_SIZE]))
    ok = ~pt[:, ID_SIZE:].any(axis=1)
    ids = np.ascontiguousarray(pt[ok, :ID_SIZE]).view(">u8").ravel()
    return [int(i) for i in ids]


def seal(key: bytes, plaintext: bytes) -> bytes:
    """CTR-encrypt plaintext under a fresh nonce; used for dictionary blocks."""
    nonce = os.urandom(NONCE_SIZE)
    return nonce + _ctr(key, nonce, plaintext)


def unseal(key: bytes, blob: bytes) -> bytes:
    return _ctr(key, blob[:NONCE_SIZE], blob[NONCE_SIZE:])
