"""Operator commands: ``fse genkeys``, ``fse update`` and ``fse search``."""

from __future__ import annotations

import argparse
import logging
import os
import stat
import sys
import time
from pathlib import Path

from . import builder, client, crypto
from .layout import IndexParams
from .server import parse_address
from .session import ProtocolError, Session

log = logging.getLogger("fse")

DEFAULT_SERVER = "127.0.0.1:7700"


class CliError(Exception):
    pass


def cmd_genkeys(out_path, force: bool = False) -> Path:
    path = Path(out_path)
    key = crypto.generate_master_key()
    if path.exists() and not force:
        raise CliError(f"{path} already exists (use --force to overwrite)")
    tmp = path.with_name(path.name + ".tmp")
    try:
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from None
    with os.fdopen(fd, "wb") as f:
        f.write(key)
    os.chmod(tmp, 0o600)
    os.replace(tmp, path)
    return path


def read_key(path) -> bytes:
    path = Path(path)
    try:
        key = path.read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read key file {path}: {exc.strerror}") from None
    if len(key) != crypto.KEY_SIZE:
        raise CliError(f"key file {path} must hold exactly {crypto.KEY_SIZE} bytes")
    if os.name == "posix" and path.stat().st_mode & (stat.S_IRWXG | stat.S_IRWXO):
        log.warning("key file %s is readable by other users", path)
    return key


def read_stopwords(path) -> frozenset:
    if not path:
        return frozenset()
    return frozenset(w.strip().lower().encode() for w in Path(path).read_text().split() if w.strip())


def format_summary(result: builder.UpdateResult, seconds: float, counters) -> str:
    transactions, sent, received = counters
    merged = ",".join(str(o) for o in result.merged_orders) or "-"
    final = "-" if result.final_order is None else str(result.final_order)
    return (f"docs={result.docs_added} words={result.words_added} tuples={result.tuples_added} "
            f"merged={merged} merged_words={result.merged_words} merged_tuples={result.merged_tuples} "
            f"final_order={final} seconds={seconds:.3f} transactions={transactions} bytes={sent + received}")


def parse_summary(line: str) -> dict[str, str]:
    return dict(field.split("=", 1) for field in line.split())


def cmd_update(session, master: bytes, docs_dir, params: IndexParams,
               stopwords=frozenset(), id_map=None, rng=None) -> str:
    docs = client.load_documents(docs_dir, id_map)
    start = time.perf_counter()
    before = session.counters()
    result = builder.index_gen(master, [(d, c) for d, _, c in docs], session, params, rng, stopwords)
    after = session.counters()
    delta = tuple(a - b for a, b in zip(after, before))
    return format_summary(result, time.perf_counter() - start, delta)


def cmd_search(session, master: bytes, word: str) -> list[str]:
    ids = client.search_word(session, master, client.normalize_query(word))
    return [f"{i:016x}" for i in ids]


def _add_common(p):
    p.add_argument("--server", default=os.environ.get("FSE_SERVER", DEFAULT_SERVER),
                   help="server host:port (env FSE_SERVER)")
    p.add_argument("--key", default=os.environ.get("FSE_KEY"), help="master key file (env FSE_KEY)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fse", description="Dynamic searchable encryption client.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("genkeys", help="write a fresh 32-byte master key")
    g.add_argument("out", nargs="?", default=os.environ.get("FSE_KEY"))
    g.add_argument("--force", action="store_true", help="overwrite an existing key file")

    u = sub.add_parser("update", help="index a directory of documents and merge it into the collection")
    _add_common(u)
    u.add_argument("docs", help="directory holding one file per document")
    u.add_argument("--locality", type=int, default=1, help="max chunks per keyword (L)")
    u.add_argument("--levels", type=int, default=8, help="stored levels (s)")
    u.add_argument("--stopwords", help="file of words to leave out of the index")
    u.add_argument("--id-map", help="file of '<hex id><TAB><relative path>' lines")

    s = sub.add_parser("search", help="print ids of documents containing one keyword")
    _add_common(s)
    s.add_argument("word")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "genkeys":
            if not args.out:
                raise CliError("no key path given (argument or FSE_KEY)")
            cmd_genkeys(args.out, args.force)
            return 0
        if not args.key:
            raise CliError("no key file given (--key or FSE_KEY)")
        master = read_key(args.key)
        with Session.connect(parse_address(args.server)) as session:
            if args.command == "update":
                params = IndexParams(args.locality, args.levels)
                id_map = client.read_id_map(args.id_map) if args.id_map else None
                print(cmd_update(session, master, args.docs, params,
                                 read_stopwords(args.stopwords), id_map))
            else:
                for line in cmd_search(session, master, args.word):
                    print(line)
        return 0
    except (CliError, client.QueryError, builder.BuildError, ProtocolError, ValueError) as exc:
        print(f"fse: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fse: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
