"""Client operations: document ingest and collection-wide search."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from . import crypto
from .builder import BuildError, tokenize
from .session import StaleError

log = logging.getLogger(__name__)

SEARCH_RETRIES = 3


class QueryError(ValueError):
    pass


def normalize_query(text: str) -> bytes:
    """Run a query through the indexing tokenizer; exactly one word must survive."""
    raw = text.encode("utf-8")
    words = tokenize(raw)
    pieces = raw.split()
    if len(words) != 1 or len(pieces) != 1:
        raise QueryError(f"query {text!r} must be a single keyword (letters and digits, 2-64 characters)")
    return words.pop()


def search_word(session, master: bytes, word: bytes, retries: int = SEARCH_RETRIES) -> list[int]:
    """LIST, then one SEARCH carrying a token per index; retried when the listing went stale."""
    for attempt in range(retries + 1):
        manifests = session.list_indexes()
        queries = [
            (m.index_id, crypto.make_token(crypto.derive_index_keys(master, m.salt), word))
            for m in manifests
        ]
        try:
            return session.search(queries)
        except StaleError:
            if attempt == retries:
                raise
            log.info("collection changed during search, retrying")
    raise AssertionError("unreachable")


def content_id(content: bytes) -> int:
    return int.from_bytes(crypto.hash_bytes(content)[:8], "big")


def read_id_map(path) -> dict[str, int]:
    ids = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            hex_id, rel = line.split("\t", 1)
            ids[rel] = int(hex_id, 16)
        except ValueError:
            raise BuildError(f"{path}:{lineno}: expected '<hex id><TAB><relative path>'") from None
    return ids


def load_documents(root, id_map: Optional[dict[str, int]] = None) -> list[tuple[int, str, bytes]]:
    """Read every regular file below root as one document.

    Ids come from id_map when it names the file, otherwise from the first
    8 bytes of the content hash.  Byte-identical files collapse into one
    document; two different files with one id are an error.
    """
    root = Path(root)
    docs = []
    by_id: dict[int, tuple[str, bytes]] = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        content = path.read_bytes()
        doc_id = id_map[rel] if id_map and rel in id_map else content_id(content)
        if not 0 <= doc_id < 1 << 64:
            raise BuildError(f"document id for {rel} does not fit in 64 bits")
        prev = by_id.get(doc_id)
        if prev is not None:
            if prev[1] == content:
                continue
            raise BuildError(f"document id collision: {prev[0]} and {rel} both map to {doc_id:016x}")
        by_id[doc_id] = (rel, content)
        docs.append((doc_id, rel, content))
    return docs
