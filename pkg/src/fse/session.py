"""Client side of the wire protocol: one request in flight per session."""

from __future__ import annotations

import socket
from typing import Optional

from . import wire
from .crypto import SearchToken
from .layout import Manifest

PART_SIZE = 1 << 20


class ProtocolError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class StaleError(ProtocolError):
    pass


class TcpTransport:
    def __init__(self, address: tuple[str, int], timeout: Optional[float] = 60.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.rfile = self.sock.makefile("rb")

    def exchange(self, frame: bytes) -> bytes:
        self.sock.sendall(frame)
        return wire.read_frame(self.rfile)

    def close(self):
        self.rfile.close()
        self.sock.close()


class LocalTransport:
    """Hands frames straight to an in-process IndexStore; byte accounting is unchanged."""

    def __init__(self, store):
        self.store = store

    def exchange(self, frame: bytes) -> bytes:
        return self.store.handle_frame(frame)

    def close(self):
        pass


class Session:
    def __init__(self, transport):
        self.transport = transport
        self.transactions = 0
        self.bytes_sent = 0
        self.bytes_received = 0

    @classmethod
    def connect(cls, address: tuple[str, int], timeout: Optional[float] = 60.0) -> "Session":
        return cls(TcpTransport(address, timeout))

    def counters(self) -> tuple[int, int, int]:
        return self.transactions, self.bytes_sent, self.bytes_received

    def close(self):
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, msg: wire.Message) -> wire.Message:
        frame = wire.encode_frame(msg)
        self.transactions += 1
        self.bytes_sent += len(frame)
        reply = self.transport.exchange(frame)
        self.bytes_received += len(reply)
        resp = wire.decode_frame(reply)
        if isinstance(resp, wire.Error):
            err = StaleError if resp.code == wire.STALE else ProtocolError
            raise err(resp.code, resp.message)
        return resp

    def _expect(self, msg, kind):
        resp = self.request(msg)
        if not isinstance(resp, kind):
            raise ProtocolError(wire.MALFORMED, f"expected {kind.__name__}, got {type(resp).__name__}")
        return resp

    def ping(self):
        self._expect(wire.Ping(), wire.Pong)

    def list_indexes(self) -> list[Manifest]:
        return [Manifest.from_bytes(m) for m in self._expect(wire.ListIndexes(), wire.Listing).manifests]

    def search(self, queries: list[tuple[bytes, SearchToken]]) -> list[int]:
        msg = wire.Search([(i, t.to_bytes()) for i, t in queries])
        return self._expect(msg, wire.SearchResult).ids

    def get_meta(self, index_id: bytes, key: bytes) -> Optional[bytes]:
        try:
            return self._expect(wire.GetMeta(index_id, key), wire.MetaBlock).block
        except ProtocolError as exc:
            if exc.code == wire.NOT_FOUND:
                return None
            raise

    def delete(self, index_id: bytes):
        self._expect(wire.DeleteIndex(index_id), wire.Ok)

    def upload(self, index, part_size: int = PART_SIZE):
        """BEGIN, one PART per part_size slice of each section, then COMMIT."""
        m = index.manifest
        self._expect(wire.BeginUpload(m.to_bytes()), wire.Ok)
        for tag, data in index.sections().items():
            view = memoryview(data)
            for off in range(0, len(data), part_size):
                self._expect(wire.UploadPart(m.index_id, tag, off, bytes(view[off:off + part_size])), wire.Ok)
        self._expect(wire.CommitUpload(m.index_id, index.checksum()), wire.Ok)
