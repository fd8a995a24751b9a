"""Update-frequency experiments: batch a dated document stream, drive updates, log metrics."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import random
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from email.utils import format_datetime, parsedate_to_datetime
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import builder, client, crypto
from .layout import IndexParams
from .server import IndexStore, parse_address
from .session import LocalTransport, Session

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    days: int = 180
    vocabulary: int = 20_000
    zipf: float = 1.1
    words_min: int = 50
    words_max: int = 500
    docs_min: int = 20
    docs_max: int = 80
    seed: int = 0
    start: date = date(2001, 1, 1)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SyntheticSpec":
        """Build from 'key=value,key=value' text, e.g. 'days=90,vocabulary=5000'."""
        kwargs: dict = {"seed": seed}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for item in filter(None, (p.strip() for p in text.split(","))):
            key, _, value = item.partition("=")
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown synthetic parameter {key!r}")
            if key == "start":
                kwargs[key] = date.fromisoformat(value)
            elif key == "zipf":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class Document:
    doc_id: int
    when: Optional[datetime]
    content: bytes
    name: str = ""


@dataclass
class BatchSpec:
    window: int
    source: Union[Path, SyntheticSpec]

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least one day")


@dataclass
class Batch:
    batch_id: int
    start: date
    docs: list[Document]


@dataclass
class BatchMetrics:
    batch_id: int
    docs_added: int
    words_added: int
    tuples_added: int
    wall_seconds: float
    transactions: int
    bytes_exchanged: int
    merged_orders: list[int]
    merged_words: int
    merged_tuples: int
    index_n: dict[int, int]
    index_disk_bytes: dict[int, int]
    cumulative_tuples: int

    def row(self) -> list:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ";".join(map(str, v))
            elif isinstance(v, dict):
                v = ";".join(f"{k}:{v[k]}" for k in sorted(v))
            elif isinstance(v, float):
                v = f"{v:.4f}"
            out.append(v)
        return out


CSV_COLUMNS = [f.name for f in dataclasses.fields(BatchMetrics)]


class OracleMismatch(AssertionError):
    pass


def synthetic_word(rank: int) -> str:
    letters = []
    r = rank
    for _ in range(4):
        r, d = divmod(r, 26)
        letters.append(chr(ord("a") + d))
    while r:
        r, d = divmod(r, 26)
        letters.append(chr(ord("a") + d))
    return "".join(reversed(letters))


def generate_stream(spec: SyntheticSpec) -> list[Document]:
    rng = np.random.default_rng(spec.seed)
    ranks = np.arange(1, spec.vocabulary + 1, dtype=np.float64)
    probs = ranks ** -spec.zipf
    probs /= probs.sum()
    vocab = [synthetic_word(r) for r in range(spec.vocabulary)]
    docs = []
    for day in range(spec.days):
        base = datetime.combine(spec.start + timedelta(days=day), datetime.min.time(), timezone.utc)
        for k in range(int(rng.integers(spec.docs_min, spec.docs_max + 1))):
            when = base + timedelta(seconds=int(rng.integers(0, 86400)))
            count = int(rng.integers(spec.words_min, spec.words_max + 1))
            body = " ".join(vocab[i] for i in rng.choice(spec.vocabulary, size=count, p=probs))
            content = (f"Date: {format_datetime(when)}\n"
                       f"Message-ID: <s{spec.seed}d{day}n{k}@synthetic>\n\n{body}\n").encode()
            docs.append(Document(client.content_id(content), when, content, f"day{day}/{k}"))
    return docs


def parse_date_header(content: bytes) -> Optional[datetime]:
    for line in content.split(b"\n"):
        line = line.rstrip(b"\r")
        if not line:
            break  # end of headers
        if line[:5].lower() == b"date:":
            try:
                when = parsedate_to_datetime(line[5:].decode("latin-1").strip())
            except (TypeError, ValueError, IndexError):
                return None
            if when.tzinfo is None:
                when = when.replace(tzinfo=timezone.utc)
            return when
    return None


def load_dated_documents(root) -> list[Document]:
    root = Path(root)
    paths = sorted(p for p in root.rglob("*") if p.is_file())
    bad = []
    docs = []
    for p in paths:
        try:
            content = p.read_bytes()
        except OSError:
            bad.append(str(p))
            continue
        docs.append(Document(client.content_id(content), parse_date_header(content), content,
                             p.relative_to(root).as_posix()))
    if bad:
        raise OSError(f"unreadable documents: {', '.join(bad)}")
    return docs


def make_batches(docs: list[Document], window: int) -> tuple[list[Batch], list[Document]]:
    """Group documents into consecutive windows of `window` days; undated ones are returned as rejects."""
    dated = sorted((d for d in docs if d.when is not None), key=lambda d: (d.when, d.name))
    rejects = [d for d in docs if d.when is None]
    if not dated:
        return [], rejects
    first = dated[0].when.astimezone(timezone.utc).date()
    groups: dict[int, list[Document]] = {}
    for d in dated:
        slot = (d.when.astimezone(timezone.utc).date() - first).days // window
        groups.setdefault(slot, []).append(d)
    batches = [Batch(n, first + timedelta(days=slot * window), groups[slot])
               for n, slot in enumerate(sorted(groups))]
    return batches, rejects


def batches_for(spec: BatchSpec) -> tuple[list[Batch], list[Document]]:
    if isinstance(spec.source, SyntheticSpec):
        docs = generate_stream(spec.source)
    else:
        docs = load_dated_documents(spec.source)
    return make_batches(docs, spec.window)


@dataclass
class BenchConfig:
    params: IndexParams = field(default_factory=IndexParams)
    seed: int = 0
    sample_words: int = 100
    out: Optional[Path] = None
    server: Optional[tuple[str, int]] = None
    data_dir: Optional[Path] = None
    word_counts: bool = True


def _dedupe(docs: list[Document]) -> list[tuple[int, bytes]]:
    seen: dict[int, bytes] = {}
    for d in docs:
        prev = seen.get(d.doc_id)
        if prev is not None and prev != d.content:
            raise builder.BuildError(f"document id collision on {d.doc_id:016x} ({d.name})")
        seen[d.doc_id] = d.content
    return list(seen.items())


def check_oracle(session, master, truth: builder.PlainIndex, rng, sample: int, batch_id: int):
    words = truth.delta
    picked = rng.sample(words, min(sample, len(words)))
    for w in picked:
        got = set(client.search_word(session, master, w))
        if got != truth.postings[w]:
            raise OracleMismatch(f"batch {batch_id}: search for {w!r} returned {len(got)} ids, "
                                 f"expected {len(truth.postings[w])}")


def run_batches(batches: list[Batch], config: BenchConfig, session=None) -> list[BatchMetrics]:
    own_dir = None
    if session is None:
        if config.server:
            session = Session.connect(config.server)
        else:
            data_dir = config.data_dir
            if data_dir is None:
                own_dir = tempfile.TemporaryDirectory(prefix="fsebench-")
                data_dir = Path(own_dir.name)
            session = Session(LocalTransport(IndexStore(data_dir)))
    master = crypto.generate_master_key()
    rng = random.Random(config.seed)
    oracle_rng = random.Random(config.seed ^ 0x5EED)
    truth = builder.PlainIndex()
    rows = []
    counts_file = None
    writer = counts_writer = None
    try:
        if config.out:
            out = open(config.out, "w", newline="")
            writer = csv.writer(out)
            writer.writerow(CSV_COLUMNS)
            if config.word_counts:
                counts_file = open(str(config.out) + ".words.csv", "w", newline="")
                counts_writer = csv.writer(counts_file)
                counts_writer.writerow(["batch_id", "word", "docs"])
        for batch in batches:
            docs = _dedupe(batch.docs)
            before = session.counters()
            start = time.perf_counter()
            result = builder.index_gen(master, docs, session, config.params, rng)
            seconds = time.perf_counter() - start
            after = session.counters()
            listing = session.list_indexes()
            truth.merge(builder.build_plain_index(docs))
            metrics = BatchMetrics(
                batch_id=batch.batch_id, docs_added=result.docs_added, words_added=result.words_added,
                tuples_added=result.tuples_added, wall_seconds=seconds,
                transactions=after[0] - before[0],
                bytes_exchanged=(after[1] - before[1]) + (after[2] - before[2]),
                merged_orders=result.merged_orders, merged_words=result.merged_words,
                merged_tuples=result.merged_tuples,
                index_n={m.order: m.n for m in listing},
                index_disk_bytes={m.order: m.disk_bytes for m in listing},
                cumulative_tuples=sum(m.n for m in listing),
            )
            if metrics.cumulative_tuples != truth.n:
                raise OracleMismatch(f"batch {batch.batch_id}: collection holds {metrics.cumulative_tuples} "
                                     f"tuples, expected {truth.n}")
            check_oracle(session, master, truth, oracle_rng, config.sample_words, batch.batch_id)
            rows.append(metrics)
            if writer:
                writer.writerow(metrics.row())
                out.flush()
            if counts_writer:
                batch_plain = builder.build_plain_index(docs)
                for w in batch_plain.delta:
                    counts_writer.writerow([batch.batch_id, w.decode(), len(batch_plain.postings[w])])
            log.info("batch %d: %d docs, N=%d, merged %s, %.2fs", batch.batch_id, metrics.docs_added,
                     metrics.tuples_added, metrics.merged_orders or "-", seconds)
    finally:
        if writer:
            out.close()
        if counts_file:
            counts_file.close()
        session.close()
        if own_dir:
            own_dir.cleanup()
    return rows


def run_experiment(spec: BatchSpec, config: BenchConfig) -> list[BatchMetrics]:
    batches, rejects = batches_for(spec)
    if rejects:
        log.warning("%d undated documents skipped: %s", len(rejects),
                    ", ".join(d.name for d in rejects[:10]))
    return run_batches(batches, config)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fsebench", description="Replay a dated document stream as batched updates.")
    parser.add_argument("--window", type=int, default=1, help="batch window in days (1, 7, 30 or any N)")
    src = parser.add_mutually_exclusive_group(required=True)
    src.add_argument("--source", help="directory of files carrying Date: headers")
    src.add_argument("--synthetic", nargs="?", const="", metavar="PARAMS",
                     help="synthetic stream, optional 'key=value,...' overrides "
                          "(days, vocabulary, zipf, words_min, words_max, docs_min, docs_max, start)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="CSV output path")
    parser.add_argument("--locality", type=int, default=1)
    parser.add_argument("--levels", type=int, default=8)
    parser.add_argument("--sample-words", type=int, default=100)
    parser.add_argument("--server", help="remote fseserver host:port (default: in-process store)")
    parser.add_argument("--data", help="data directory for the in-process store (must be fresh)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    source = SyntheticSpec.parse(args.synthetic, args.seed) if args.synthetic is not None else Path(args.source)
    config = BenchConfig(
        params=IndexParams(args.locality, args.levels), seed=args.seed,
        sample_words=args.sample_words, out=Path(args.out),
        server=parse_address(args.server) if args.server else None,
        data_dir=Path(args.data) if args.data else None,
    )
    if config.data_dir and config.data_dir.exists() and any(config.data_dir.iterdir()):
        parser.error(f"data directory {config.data_dir} is not empty")
    try:
        rows = run_experiment(BatchSpec(args.window, source), config)
    except (OracleMismatch, builder.BuildError, OSError, ValueError) as exc:
        print(f"fsebench: error: {exc}", file=sys.stderr)
        return 1
    total = sum(r.bytes_exchanged for r in rows)
    print(f"batches={len(rows)} bytes={total} out={args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
