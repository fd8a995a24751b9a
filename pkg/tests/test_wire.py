import io
import math
import os
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from conftest import BOOKS
from fse import builder, crypto, wire
from fse.layout import IndexParams
from fse.session import LocalTransport, Session

ids16 = st.binary(min_size=16, max_size=16)

messages = st.one_of(
    st.just(wire.ListIndexes()),
    st.just(wire.Ping()),
    st.just(wire.Ok()),
    st.just(wire.Pong()),
    st.builds(wire.BeginUpload, st.binary(min_size=1, max_size=200)),
    st.builds(wire.UploadPart, ids16, st.sampled_from([1, 2, 3]), st.integers(0, 2**64 - 1),
              st.binary(max_size=300)),
    st.builds(wire.CommitUpload, ids16, st.binary(min_size=32, max_size=32)),
    st.builds(wire.DeleteIndex, ids16),
    st.builds(wire.Search, st.lists(st.tuples(ids16, st.binary(min_size=96, max_size=96)), max_size=6)),
    st.builds(wire.GetMeta, ids16, ids16),
    st.builds(wire.Listing, st.lists(st.binary(max_size=120), max_size=5)),
    st.builds(wire.SearchResult, st.lists(st.integers(0, 2**64 - 1), max_size=50)),
    st.builds(wire.MetaBlock, st.binary(max_size=4096)),
    st.builds(wire.Error, st.integers(0, 2**16 - 1), st.text(max_size=40)),
)


def test_ping_frame_bytes():
    assert wire.encode_frame(wire.Ping()) == bytes.fromhex("0000000106")
    assert wire.decode_frame(bytes.fromhex("0000000106")) == wire.Ping()


@settings(max_examples=10_000, deadline=None)
@given(messages)
def test_roundtrip(msg):
    frame = wire.encode_frame(msg)
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    assert wire.decode_frame(frame) == msg


def test_huge_length_rejected_before_allocation():
    frame = b"\xff\xff\xff\xff\x06"
    with pytest.raises(wire.FrameError) as exc:
        wire.decode_frame(frame)
    assert exc.value.code == wire.OVERSIZE

    class Stream(io.BytesIO):
        asked = []

        def read(self, n=-1):
            self.asked.append(n)
            return super().read(n)

    s = Stream(frame)
    with pytest.raises(wire.FrameError):
        wire.read_frame(s)
    assert s.asked == [4]


def test_decoder_error_codes():
    cases = {
        b"": wire.TRUNCATED,
        b"\x00\x00": wire.TRUNCATED,
        b"\x00\x00\x00\x05\x06": wire.TRUNCATED,
        b"\x00\x00\x00\x00": wire.MALFORMED,
        b"\x00\x00\x00\x01\x42": wire.UNKNOWN_OPCODE,
        b"\x00\x00\x00\x02\x06\x00": wire.MALFORMED,
        b"\x00\x00\x00\x01\x06\x00": wire.MALFORMED,
        b"\x00\x00\x00\x05\x07\x00\x00\x00\x01": wire.MALFORMED,
        b"\x04\x00\x00\x01\x06": wire.OVERSIZE,
    }
    for frame, code in cases.items():
        with pytest.raises(wire.FrameError) as exc:
            wire.decode_frame(frame)
        assert exc.value.code == code, frame


def fuzz_inputs(r, count):
    valid = [wire.encode_frame(m) for m in (wire.Ping(), wire.Search([(bytes(16), bytes(96))]),
                                            wire.Error(3, "x"), wire.Listing([b"abc"]))]
    for _ in range(count):
        kind = r.random()
        if kind < 0.4:
            yield os.urandom(r.randint(0, 300))
        elif kind < 0.8:
            # plausible header with random body
            body = bytes([r.choice(list(wire.MESSAGES))]) + os.urandom(r.randint(0, 200))
            yield struct.pack(">I", len(body) + r.choice([0, 0, 0, -1, 1])) + body
        else:
            f = bytearray(r.choice(valid))
            for _ in range(r.randint(1, 3)):
                f[r.randrange(len(f))] = r.randrange(256)
            yield bytes(f)


def test_decoder_total_on_random_bytes():
    r = random.Random(77)
    outcomes = {"ok": 0, "err": 0}
    for data in fuzz_inputs(r, 10_000):
        try:
            wire.decode_frame(data)
            outcomes["ok"] += 1
        except wire.FrameError as exc:
            assert exc.code in (wire.OVERSIZE, wire.TRUNCATED, wire.UNKNOWN_OPCODE, wire.MALFORMED)
            outcomes["err"] += 1
    assert outcomes["err"] > 0


def test_server_answers_every_garbage_frame(store):
    r = random.Random(78)
    for data in fuzz_inputs(r, 2000):
        reply = wire.decode_frame(store.handle_frame(data))
        assert isinstance(reply, (wire.Error, wire.Pong, wire.Listing, wire.SearchResult, wire.Ok,
                                  wire.MetaBlock))


def test_ping_counters(session):
    session.ping()
    assert session.counters() == (1, 5, 5)


def test_counters_monotone(session, master, rng):
    seen = [session.counters()]
    ops = [session.ping, session.list_indexes,
           lambda: builder.index_gen(master, BOOKS.items(), session, IndexParams(2, 2), rng),
           lambda: session.search([]),
           session.list_indexes]
    for op in ops:
        op()
        now = session.counters()
        assert all(a <= b for a, b in zip(seen[-1], now))
        seen.append(now)
    assert seen[-1] > seen[0]


@pytest.mark.parametrize("part", [1 << 20, 1000, 4096])
def test_upload_transaction_count(session, part):
    keys = crypto.derive_index_keys(os.urandom(32), os.urandom(16))
    r = random.Random(5)
    docs = [(k, b" ".join(r.choice([b"alpha", b"bravo", b"charlie", b"delta"]) for _ in range(4)))
            for k in range(1, 200)]
    enc = builder.setup(keys, builder.build_plain_index(docs), IndexParams(2, 3), r)
    before = session.transactions
    session.upload(enc, part_size=part)
    expected = sum(math.ceil(len(d) / part) for d in enc.sections().values()) + 2
    assert session.transactions - before == expected


def test_bytes_counted_match_frames(store):
    sent = []

    class Spy(LocalTransport):
        def exchange(self, frame):
            reply = super().exchange(frame)
            sent.append(len(frame) + len(reply))
            return reply

    s = Session(Spy(store))
    s.ping()
    s.list_indexes()
    s.search([])
    assert s.bytes_sent + s.bytes_received == sum(sent)
