import random
import threading

import pytest

from fse import crypto
from fse.server import FseServer, IndexStore
from fse.session import LocalTransport, Session

# Five volumes, keyed by their document ids; text limited to the six keywords.
BOOKS = {
    3: b"Arthur dolphin hooloovoo Zaphod",
    5: b"Arthur Zaphod",
    8: b"Arthur krikkit Zaphod",
    12: b"Arthur dolphin Fenchurch krikkit Zaphod",
    15: b"Arthur Fenchurch Zaphod",
}
ASSOCIATIONS = {
    b"arthur": {3, 5, 8, 12, 15},
    b"dolphin": {3, 12},
    b"fenchurch": {12, 15},
    b"hooloovoo": {3},
    b"krikkit": {8, 12},
    b"zaphod": {3, 5, 8, 12, 15},
}

ACCEPTANCE_RESULTS = []


@pytest.fixture
def master():
    return crypto.generate_master_key()


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def store(tmp_path):
    return IndexStore(tmp_path / "data")


@pytest.fixture
def session(store):
    return Session(LocalTransport(store))


@pytest.fixture
def tcp_server(tmp_path):
    server = FseServer(("127.0.0.1", 0), IndexStore(tmp_path / "tcpdata"))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test body sets .detail as it goes."""
    class Record:
        detail = ""
    rec = Record()
    yield rec
    name = request.node.name
    failed = getattr(request.node, "_failed", False)
    ACCEPTANCE_RESULTS.append((name, not failed, rec.detail))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and rep.failed:
        item._failed = True


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
