from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import settings

from dlpgate.crypto import KeyStore, generate_key
from dlpgate.gateway import Gateway, GatewayConfig, start_server
from dlpgate.replay import IcapClient

settings.register_profile("default", deadline=None)
settings.load_profile("default")

DATA = Path(__file__).resolve().parent.parent / "src" / "dlpgate" / "data"


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@pytest.fixture
def keypair():
    return generate_key()


class RunningGateway:
    def __init__(self, gateway: Gateway, server, thread) -> None:
        self.gateway, self.server, self.thread = gateway, server, thread
        self.host, self.port = server.server_address[:2]
        self.client = IcapClient(self.host, self.port, timeout=20)

    def stop(self) -> None:
        self.server.stop()
        self.thread.join(10)


@pytest.fixture
def gateway_factory(tmp_path):
    """Build a gateway from a config mapping rooted at ``tmp_path`` and start it."""
    started: list[RunningGateway] = []

    def make(doc: dict | None = None, *, keystore: KeyStore | None = None) -> RunningGateway:
        doc = dict(doc or {})
        doc.setdefault("listen", "127.0.0.1:0")
        doc.setdefault("incident_log", str(tmp_path / "incidents"))
        if keystore is not None:
            keystore.dump(tmp_path / "keystore.json")
            doc["keystore"] = str(tmp_path / "keystore.json")
        cfg = GatewayConfig.from_mapping(doc, tmp_path)
        gw = Gateway(cfg)
        srv, th = start_server(gw)
        rg = RunningGateway(gw, srv, th)
        started.append(rg)
        return rg

    yield make
    for rg in started:
        rg.stop()


def write(path: Path, text: str | bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(text, str):
        path.write_text(text)
    else:
        path.write_bytes(text)
    return path


@pytest.fixture
def no_numba(monkeypatch):
    monkeypatch.setenv("DLPGATE_NO_NUMBA", "1")
    return os.environ


# ------------------------------------------------------------ acceptance report

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _ACCEPTANCE[n] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
