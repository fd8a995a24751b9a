import os
import random
import signal
import socket
import subprocess
import sys
import threading

import pytest

from conftest import ASSOCIATIONS, BOOKS
from corpora import random_corpus
from fse import builder, client, crypto, wire
from fse.builder import build_plain_index, setup
from fse.layout import IndexParams, ht_key, ht_value
from fse.server import JOURNAL, IndexStore, StoredIndex
from fse.session import LocalTransport, ProtocolError, Session, StaleError


def make_index(master, docs, params=IndexParams(2, 3), r=None):
    salt = crypto.new_salt()
    keys = crypto.derive_index_keys(master, salt)
    return setup(keys, build_plain_index(docs), params, r or random.Random(0), salt=salt), keys


def token_for(master, manifest, word):
    return crypto.make_token(crypto.derive_index_keys(master, manifest.salt), word)


def test_lookup_books(session, store, master):
    enc, keys = make_index(master, BOOKS.items())
    session.upload(enc)
    idx = store.snapshot()[enc.manifest.index_id]
    assert idx.lookup(crypto.make_token(keys, b"dolphin")) == {3, 12}
    assert idx.lookup(crypto.make_token(keys, b"ford")) == set()
    for w, ids in ASSOCIATIONS.items():
        assert set(session.search([(enc.manifest.index_id, crypto.make_token(keys, w))])) == ids


def test_lookup_random_corpora(session, store, master):
    r = random.Random(31)
    for _ in range(10):
        docs, _ = random_corpus(r, max_docs=20, max_vocab=80)
        enc, keys = make_index(master, docs, IndexParams(r.choice([1, 2, 4]), r.choice([1, 2, 3])), r)
        session.upload(enc)
        idx = store.snapshot()[enc.manifest.index_id]
        for w, ids in build_plain_index(docs).postings.items():
            assert idx.lookup(crypto.make_token(keys, w)) == ids
        session.delete(enc.manifest.index_id)


def test_tampered_location_is_corruption(session, master):
    enc, keys = make_index(master, BOOKS.items(), IndexParams(1, 1))
    tok = crypto.make_token(keys, b"dolphin")
    k = ht_key(tok.t1, 1)
    ht = bytearray(enc.ht)
    pos = next(p for p in range(0, len(ht), 24) if ht[p:p + 16] == k)
    ht[pos + 16:pos + 24] = ht_value(tok.t2, 1, 5, 7)  # level 5 has a single bucket
    enc.ht = bytes(ht)
    session.upload(enc)
    with pytest.raises(ProtocolError) as exc:
        session.search([(enc.manifest.index_id, tok)])
    assert exc.value.code == wire.CORRUPT
    # other words are unaffected
    assert session.search([(enc.manifest.index_id, crypto.make_token(keys, b"krikkit"))]) == [8, 12]


def test_stale_index_and_empty_collection(session, master):
    assert session.search([]) == []
    assert client.search_word(session, master, b"dolphin") == []
    enc, keys = make_index(master, BOOKS.items())
    session.upload(enc)
    session.delete(enc.manifest.index_id)
    with pytest.raises(StaleError):
        session.search([(enc.manifest.index_id, crypto.make_token(keys, b"dolphin"))])
    with pytest.raises(ProtocolError) as exc:
        session.delete(enc.manifest.index_id)
    assert exc.value.code == wire.NOT_FOUND


def test_union_across_indexes(session, master):
    a, _ = make_index(master, [(1, b"shared alpha"), (2, b"shared")])
    b, _ = make_index(master, [(k, b"shared beta") for k in range(2, 9)])
    assert a.manifest.order != b.manifest.order
    session.upload(a)
    session.upload(b)
    q = [(m.index_id, token_for(master, m, b"shared")) for m in session.list_indexes()]
    assert session.search(q) == list(range(1, 9))
    assert session.search(q[:1]) == sorted(
        StoredIndex.lookup(session.transport.store.snapshot()[q[0][0]], q[0][1]))
    assert client.search_word(session, master, b"beta") == list(range(2, 9))


def test_duplicate_order_rejected(session, master):
    a, _ = make_index(master, BOOKS.items())
    b, _ = make_index(master, [(k, b"arthur zaphod dent") for k in range(20, 26)])
    assert a.manifest.order == b.manifest.order == 5
    session.upload(a)
    with pytest.raises(ProtocolError) as exc:
        session.upload(b)
    assert exc.value.code == wire.DUPLICATE_ORDER
    assert [m.index_id for m in session.list_indexes()] == [a.manifest.index_id]


def test_checksum_mismatch_discards_upload(session, store, master):
    enc, _ = make_index(master, BOOKS.items())
    m = enc.manifest
    session.request(wire.BeginUpload(m.to_bytes()))
    for tag, data in enc.sections().items():
        session.request(wire.UploadPart(m.index_id, tag, 0, data))
    with pytest.raises(ProtocolError) as exc:
        session.request(wire.CommitUpload(m.index_id, bytes(32)))
    assert exc.value.code == wire.CHECKSUM_MISMATCH
    assert session.list_indexes() == []
    assert not (store.root / ".incoming" / m.index_id.hex()).exists()
    # the same index uploads cleanly afterwards
    session.upload(enc)
    assert len(session.list_indexes()) == 1


def test_incomplete_and_oversized_parts(session, master):
    enc, _ = make_index(master, BOOKS.items())
    m = enc.manifest
    session.request(wire.BeginUpload(m.to_bytes()))
    with pytest.raises(ProtocolError) as exc:
        session.request(wire.UploadPart(m.index_id, wire.SECTION_HT, len(enc.ht), b"x"))
    assert exc.value.code == wire.BAD_UPLOAD
    with pytest.raises(ProtocolError) as exc:
        session.request(wire.CommitUpload(m.index_id, enc.checksum()))
    assert exc.value.code == wire.BAD_UPLOAD
    with pytest.raises(ProtocolError) as exc:
        session.request(wire.UploadPart(os.urandom(16), 1, 0, b"x"))
    assert exc.value.code == wire.NOT_FOUND
    with pytest.raises(ProtocolError) as exc:
        session.request(wire.BeginUpload(b"garbage"))
    assert exc.value.code == wire.BAD_UPLOAD


def test_get_meta_roundtrip(session, master):
    words = [f"word{k:04d}".encode() for k in range(250)]
    enc, keys = make_index(master, [(1, b" ".join(words))])
    session.upload(enc)
    m = enc.manifest
    assert m.meta_records == 3
    got = builder.recover_delta(keys, lambda k: session.get_meta(m.index_id, k))
    assert got == words
    assert session.get_meta(m.index_id, os.urandom(16)) is None
    with pytest.raises(StaleError):
        session.get_meta(os.urandom(16), os.urandom(16))


def test_layout_on_disk_and_reopen(tmp_path, master):
    store = IndexStore(tmp_path / "d")
    s = Session(LocalTransport(store))
    builder.index_gen(master, BOOKS.items(), s, IndexParams(2, 3), random.Random(1))
    [m] = s.list_indexes()
    d = tmp_path / "d" / m.index_id.hex()
    assert (d / "manifest").is_file() and (d / "ht").is_file() and (d / "meta").is_file()
    assert sorted(int(p.name) for p in (d / "levels").iterdir()) == sorted(m.buckets)
    assert (tmp_path / "d" / JOURNAL).is_file()
    again = Session(LocalTransport(IndexStore(tmp_path / "d")))
    assert client.search_word(again, master, b"fenchurch") == [12, 15]
    # an unjournaled directory is swept at startup
    (tmp_path / "d" / ("ab" * 16)).mkdir()
    IndexStore(tmp_path / "d")
    assert not (tmp_path / "d" / ("ab" * 16)).exists()


def test_tcp_session(tcp_server, master, rng):
    with Session.connect(tcp_server.server_address) as s:
        s.ping()
        assert s.counters() == (1, 5, 5)
        builder.index_gen(master, BOOKS.items(), s, IndexParams(), rng)
        assert client.search_word(s, master, b"dolphin") == [3, 12]


def test_tcp_bad_header_gets_error(tcp_server):
    with socket.create_connection(tcp_server.server_address, timeout=5) as sock:
        sock.sendall(b"\xff\xff\xff\xff")
        reply = sock.makefile("rb").read()
    msg = wire.decode_frame(reply)
    assert isinstance(msg, wire.Error) and msg.code == wire.OVERSIZE


def test_concurrent_searches_during_updates(tcp_server, master):
    addr = tcp_server.server_address
    r = random.Random(4)
    truth = builder.PlainIndex()
    with Session.connect(addr) as s:
        docs = [(k, b"common") for k in range(1, 6)]
        builder.index_gen(master, docs, s, IndexParams(), r)
        truth.merge(build_plain_index(docs))
    errors = []
    stop = threading.Event()

    def reader():
        with Session.connect(addr) as rs:
            while not stop.is_set():
                try:
                    got = client.search_word(rs, master, b"common", retries=20)
                    # results only grow, never mix partial states
                    assert set(got) >= set(range(1, 6)) and len(got) == len(set(got))
                except Exception as exc:  # noqa: BLE001
                    errors.append(exc)
                    return

    threads = [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    with Session.connect(addr) as s:
        next_id = 6
        for _ in range(12):
            docs = [(next_id + k, b"common extra") for k in range(r.randint(1, 6))]
            next_id += len(docs)
            builder.index_gen(master, docs, s, IndexParams(), r)
            truth.merge(build_plain_index(docs))
    stop.set()
    for t in threads:
        t.join()
    assert not errors
    with Session.connect(addr) as s:
        assert set(client.search_word(s, master, b"common")) == truth.postings[b"common"]


def start_server(data):
    proc = subprocess.Popen([sys.executable, "-m", "fse.server", "--listen", "127.0.0.1:0", "--data", str(data)],
                            stdout=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    assert line.startswith("listening on "), line
    host, port = line.split()[-1].rsplit(":", 1)
    return proc, (host, int(port))


def kill_between_part_and_commit(tmp_path, master):
    """Commit the fixture, then die mid-upload of a second index; returns the restarted session."""
    data = tmp_path / "crash"
    proc, addr = start_server(data)
    try:
        with Session.connect(addr) as s:
            builder.index_gen(master, BOOKS.items(), s, IndexParams(), random.Random(2))
            enc, _ = make_index(master, [(100, b"zaphod heart of gold")])
            s.request(wire.BeginUpload(enc.manifest.to_bytes()))
            s.request(wire.UploadPart(enc.manifest.index_id, wire.SECTION_HT, 0, enc.ht))
            assert (data / ".incoming" / enc.manifest.index_id.hex()).exists()
            proc.send_signal(signal.SIGKILL)
            proc.wait(10)
    finally:
        if proc.poll() is None:
            proc.kill()
    return data, enc


def test_kill_between_part_and_commit(tmp_path, master):
    data, enc = kill_between_part_and_commit(tmp_path, master)
    proc, addr = start_server(data)
    try:
        with Session.connect(addr) as s:
            listing = s.list_indexes()
            assert [m.order for m in listing] == [5]
            assert enc.manifest.index_id not in {m.index_id for m in listing}
            for w, ids in ASSOCIATIONS.items():
                assert set(client.search_word(s, master, w)) == ids
        assert not (data / ".incoming").exists()
        assert not (data / enc.manifest.index_id.hex()).exists()
    finally:
        proc.kill()
        proc.wait(10)
