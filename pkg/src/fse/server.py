"""Untrusted index host.

The server stores encrypted indexes, answers token searches and hands out
dictionary blocks.  It holds no keys; the only decryption it performs is the
bucket scan under H(t3) for a token it was handed.

Data directory layout::

    <dir>/collection.journal          committed index ids + generation
    <dir>/<index_id_hex>/manifest
    <dir>/<index_id_hex>/ht           sorted 24-byte records
    <dir>/<index_id_hex>/levels/<i>   concatenated buckets of level i
    <dir>/<index_id_hex>/meta         sorted 16 + 4096 byte records
    <dir>/.incoming/<index_id_hex>/   uploads in progress, wiped at startup
"""

from __future__ import annotations

import argparse
import bisect
import hashlib
import json
import logging
import mmap
import os
import shutil
import socketserver
import sys
import threading
from dataclasses import dataclass
from pathlib import Path

from . import crypto, wire
from .layout import (
    HT_KEY_SIZE, HT_RECORD_SIZE, META_KEY_SIZE, META_RECORD_SIZE, Manifest, bucket_bytes, ht_key, ht_open,
)

log = logging.getLogger(__name__)

JOURNAL = "collection.journal"
INCOMING = ".incoming"
MAX_LEVEL = 40


class ServerError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Keys:
    """Sequence view over the keys of a sorted fixed-width record file."""

    def __init__(self, buf, record: int, key: int):
        self.buf, self.record, self.key = buf, record, key

    def __len__(self):
        return len(self.buf) // self.record

    def __getitem__(self, k):
        p = k * self.record
        return self.buf[p:p + self.key]


def _map(path: Path):
    with open(path, "rb") as f:
        if os.fstat(f.fileno()).st_size == 0:
            return b""
        return mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)


def _find(buf, record: int, key_size: int, key: bytes):
    if not buf:
        return None
    keys = _Keys(buf, record, key_size)
    k = bisect.bisect_left(keys, key)
    if k < len(keys) and keys[k] == key:
        p = k * record + key_size
        return buf[p:(k + 1) * record]
    return None


@dataclass
class StoredIndex:
    manifest: Manifest
    path: Path
    ht: object
    levels: dict
    meta: object

    @classmethod
    def open(cls, path: Path) -> "StoredIndex":
        manifest = Manifest.from_bytes((path / "manifest").read_bytes())
        levels = {i: _map(path / "levels" / str(i)) for i in manifest.buckets}
        idx = cls(manifest, path, _map(path / "ht"), levels, _map(path / "meta"))
        idx.check_sizes()
        return idx

    def check_sizes(self):
        m = self.manifest
        if len(self.ht) != m.ht_size or len(self.meta) != m.meta_size:
            raise ServerError(wire.CORRUPT, f"file sizes of {self.path.name} disagree with manifest")
        for i, buf in self.levels.items():
            if len(buf) != m.level_size(i):
                raise ServerError(wire.CORRUPT, f"level {i} of {self.path.name} has the wrong size")

    def lookup(self, token: crypto.SearchToken) -> set[int]:
        m = self.manifest
        wk = crypto.entry_key(token.t3)
        found: set[int] = set()
        for c in range(1, m.locality + 1):
            value = _find(self.ht, HT_RECORD_SIZE, HT_KEY_SIZE, ht_key(token.t1, c))
            if value is None:
                break
            i, x = ht_open(token.t2, c, value)
            if i not in m.buckets or x >= m.buckets[i]:
                raise ServerError(wire.CORRUPT, f"hash table points outside index {m.index_id.hex()}")
            size = bucket_bytes(i)
            found.update(crypto.decrypt_entries(wk, self.levels[i][x * size:(x + 1) * size]))
        return found

    def get_meta(self, key: bytes):
        return _find(self.meta, META_RECORD_SIZE, META_KEY_SIZE, key)


class _Upload:
    def __init__(self, manifest: Manifest, path: Path):
        self.manifest = manifest
        self.path = path
        self.sizes = manifest.section_sizes()
        self.received = dict.fromkeys(self.sizes, 0)
        offsets, pos = [], 0
        for i in manifest.level_order():
            offsets.append((pos, i))
            pos += manifest.level_size(i)
        self.level_offsets = offsets
        (path / "levels").mkdir(parents=True)
        self._size(path / "ht", manifest.ht_size)
        self._size(path / "meta", manifest.meta_size)
        for i in manifest.buckets:
            self._size(path / "levels" / str(i), manifest.level_size(i))
        (path / "manifest").write_bytes(manifest.to_bytes())

    @staticmethod
    def _size(path: Path, size: int):
        with open(path, "wb") as f:
            f.truncate(size)

    @staticmethod
    def _write(path: Path, offset: int, data: bytes):
        with open(path, "r+b") as f:
            f.seek(offset)
            f.write(data)

    def write(self, section: int, offset: int, data: bytes):
        if offset + len(data) > self.sizes[section]:
            raise ServerError(wire.BAD_UPLOAD, "part extends past the end of its section")
        if section == wire.SECTION_HT:
            self._write(self.path / "ht", offset, data)
        elif section == wire.SECTION_META:
            self._write(self.path / "meta", offset, data)
        else:
            pos, end = offset, offset + len(data)
            for start, i in self.level_offsets:
                stop = start + self.manifest.level_size(i)
                if pos < stop and end > start:
                    lo, hi = max(pos, start), min(end, stop)
                    self._write(self.path / "levels" / str(i), lo - start, data[lo - offset:hi - offset])
        self.received[section] += len(data)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        files = [self.path / "ht"] + [self.path / "levels" / str(i) for i in self.manifest.level_order()]
        for p in files + [self.path / "meta"]:
            with open(p, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    h.update(chunk)
        return h.digest()


def _sorted_records(buf, record: int, key: int) -> bool:
    keys = _Keys(buf, record, key)
    return all(keys[k] < keys[k + 1] for k in range(len(keys) - 1))


def _fsync_dir(path: Path):
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


class IndexStore:
    """Persistent collection with snapshot reads and serialized mutations."""

    def __init__(self, data_dir):
        self.root = Path(data_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._uploads: dict[bytes, _Upload] = {}
        self.generation = 0
        self._indexes: dict[bytes, StoredIndex] = {}
        self._recover()

    def _recover(self):
        shutil.rmtree(self.root / INCOMING, ignore_errors=True)
        committed = []
        journal = self.root / JOURNAL
        if journal.exists():
            state = json.loads(journal.read_text())
            self.generation = state["generation"]
            committed = state["indexes"]
        indexes = {}
        for hex_id in committed:
            idx = StoredIndex.open(self.root / hex_id)
            indexes[idx.manifest.index_id] = idx
        for entry in self.root.iterdir():
            if entry.is_dir() and entry.name != INCOMING and entry.name not in committed:
                log.info("discarding uncommitted directory %s", entry.name)
                shutil.rmtree(entry, ignore_errors=True)
        self._indexes = indexes

    def _write_journal(self, indexes: dict, generation: int):
        tmp = self.root / (JOURNAL + ".tmp")
        state = {"generation": generation, "indexes": sorted(i.hex() for i in indexes)}
        with open(tmp, "w") as f:
            json.dump(state, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.root / JOURNAL)
        _fsync_dir(self.root)

    def snapshot(self) -> dict[bytes, StoredIndex]:
        return self._indexes

    def list_indexes(self) -> list[Manifest]:
        snap = self.snapshot()
        return sorted((i.manifest for i in snap.values()), key=lambda m: m.order)

    def begin_upload(self, manifest_bytes: bytes):
        try:
            manifest = Manifest.from_bytes(manifest_bytes)
        except ValueError as exc:
            raise ServerError(wire.BAD_UPLOAD, f"bad manifest: {exc}") from None
        if any(i > MAX_LEVEL for i in manifest.buckets):
            raise ServerError(wire.BAD_UPLOAD, "level too large")
        with self._lock:
            if manifest.index_id in self._indexes:
                raise ServerError(wire.BAD_UPLOAD, "index id already committed")
            path = self.root / INCOMING / manifest.index_id.hex()
            shutil.rmtree(path, ignore_errors=True)
            self._uploads[manifest.index_id] = _Upload(manifest, path)

    def upload_part(self, index_id: bytes, section: int, offset: int, data: bytes):
        with self._lock:
            up = self._uploads.get(index_id)
            if up is None:
                raise ServerError(wire.NOT_FOUND, "no upload in progress for this id")
            up.write(section, offset, data)

    def commit(self, index_id: bytes, checksum: bytes):
        with self._lock:
            up = self._uploads.pop(index_id, None)
            if up is None:
                raise ServerError(wire.NOT_FOUND, "no upload in progress for this id")
            try:
                self._commit(up, checksum)
            except BaseException:
                shutil.rmtree(up.path, ignore_errors=True)
                raise

    def _commit(self, up: _Upload, checksum: bytes):
        m = up.manifest
        if up.received != up.sizes:
            raise ServerError(wire.BAD_UPLOAD, "upload incomplete")
        if up.digest() != checksum:
            raise ServerError(wire.CHECKSUM_MISMATCH, "section checksum mismatch")
        if any(i.manifest.order == m.order for i in self._indexes.values()):
            raise ServerError(wire.DUPLICATE_ORDER, f"an order-{m.order} index already exists")
        final = self.root / m.index_id.hex()
        os.replace(up.path, final)
        idx = StoredIndex.open(final)
        if not _sorted_records(idx.ht, HT_RECORD_SIZE, HT_KEY_SIZE) or not _sorted_records(
                idx.meta, META_RECORD_SIZE, META_KEY_SIZE):
            shutil.rmtree(final, ignore_errors=True)
            raise ServerError(wire.BAD_UPLOAD, "record files are not sorted")
        indexes = dict(self._indexes)
        indexes[m.index_id] = idx
        self._write_journal(indexes, self.generation + 1)
        self._indexes = indexes
        self.generation += 1

    def delete(self, index_id: bytes):
        with self._lock:
            idx = self._indexes.get(index_id)
            if idx is None:
                raise ServerError(wire.NOT_FOUND, "unknown index id")
            indexes = dict(self._indexes)
            del indexes[index_id]
            self._write_journal(indexes, self.generation + 1)
            self._indexes = indexes
            self.generation += 1
            shutil.rmtree(idx.path, ignore_errors=True)

    def search(self, queries) -> list[int]:
        snap = self.snapshot()
        found: set[int] = set()
        for index_id, token in queries:
            idx = snap.get(index_id)
            if idx is None:
                raise ServerError(wire.STALE, f"index {index_id.hex()} is not in the collection")
            found |= idx.lookup(token)
        return sorted(found)

    def get_meta(self, index_id: bytes, key: bytes):
        idx = self.snapshot().get(index_id)
        if idx is None:
            raise ServerError(wire.STALE, f"index {index_id.hex()} is not in the collection")
        return idx.get_meta(key)

    def handle(self, msg: wire.Message) -> wire.Message:
        try:
            return self._dispatch(msg)
        except ServerError as exc:
            return wire.Error(exc.code, str(exc))
        except Exception as exc:  # noqa: BLE001 - one response per request, always
            log.exception("request failed")
            return wire.Error(wire.INTERNAL, f"internal error: {type(exc).__name__}")

    def _dispatch(self, msg):
        if isinstance(msg, wire.Ping):
            return wire.Pong()
        if isinstance(msg, wire.ListIndexes):
            return wire.Listing([m.to_bytes() for m in self.list_indexes()])
        if isinstance(msg, wire.Search):
            queries = [(i, crypto.SearchToken.from_bytes(t)) for i, t in msg.queries]
            return wire.SearchResult(self.search(queries))
        if isinstance(msg, wire.GetMeta):
            block = self.get_meta(msg.index_id, msg.key)
            if block is None:
                raise ServerError(wire.NOT_FOUND, "no such meta block")
            return wire.MetaBlock(bytes(block))
        if isinstance(msg, wire.BeginUpload):
            self.begin_upload(msg.manifest)
        elif isinstance(msg, wire.UploadPart):
            self.upload_part(msg.index_id, msg.section, msg.offset, msg.data)
        elif isinstance(msg, wire.CommitUpload):
            self.commit(msg.index_id, msg.checksum)
        elif isinstance(msg, wire.DeleteIndex):
            self.delete(msg.index_id)
        else:
            raise ServerError(wire.MALFORMED, f"{type(msg).__name__} is not a request")
        return wire.Ok()

    def handle_frame(self, frame: bytes) -> bytes:
        try:
            msg = wire.decode_frame(frame)
        except wire.FrameError as exc:
            return wire.encode_frame(wire.Error(exc.code, str(exc)))
        return wire.encode_frame(self.handle(msg))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        store: IndexStore = self.server.store
        while True:
            try:
                frame = wire.read_frame(self.rfile)
            except EOFError:
                return
            except wire.FrameError as exc:
                # the stream cannot be resynchronised after a bad header
                self.wfile.write(wire.encode_frame(wire.Error(exc.code, str(exc))))
                return
            self.wfile.write(store.handle_frame(frame))
            self.wfile.flush()


class FseServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, store: IndexStore):
        super().__init__(address, _Handler)
        self.store = store


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fseserver", description="Serve encrypted indexes over TCP.")
    parser.add_argument("--listen", default=os.environ.get("FSE_LISTEN", "127.0.0.1:7700"),
                        help="address to bind, host:port (env FSE_LISTEN)")
    parser.add_argument("--data", default=os.environ.get("FSE_DATA"),
                        help="data directory (env FSE_DATA)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    if not args.data:
        parser.error("--data or FSE_DATA is required")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    server = FseServer(parse_address(args.listen), IndexStore(args.data))
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
