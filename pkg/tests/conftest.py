from __future__ import annotations

import shutil
import socket
from contextlib import contextmanager
from pathlib import Path

import pytest

from capmt.backend import BackendConfig, BackendMode, HttpBackend, make_backend
from capmt.corpus import read_segmented_documents
from capmt.datastore import load_index

FIXTURES = Path(__file__).parent / "fixtures"


def replay_config(cassette: str | Path, **kw) -> BackendConfig:
    return BackendConfig(endpoint="toy://", model_name="toy", mode=BackendMode.REPLAY, cassette=str(cassette), **kw)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def fixture_copy(tmp_path) -> Path:
    """A scratch copy of the fixture directory, so tests may chdir and write freely."""
    dst = tmp_path / "fixtures"
    shutil.copytree(FIXTURES, dst, ignore=shutil.ignore_patterns("*.py", "__pycache__"))
    return dst


@pytest.fixture(scope="session")
def index():
    return load_index(FIXTURES / "datastore.index.jsonl")


@pytest.fixture(scope="session")
def docs():
    return read_segmented_documents(FIXTURES / "docs.de.txt", "de")


@pytest.fixture
def compare_backend():
    return make_backend(replay_config(FIXTURES / "compare.cassette.jsonl"))


class NetworkCounter:
    def __init__(self):
        self.socket_connects = 0
        self._http_before = HttpBackend.requests_sent

    @property
    def operations(self) -> int:
        return self.socket_connects + HttpBackend.requests_sent - self._http_before


@pytest.fixture
def network_guard(monkeypatch) -> NetworkCounter:
    """Count (and refuse) every socket connection attempt made during the test."""
    counter = NetworkCounter()

    def refuse(self, *args, **kwargs):
        counter.socket_connects += 1
        raise OSError("network access attempted during a hermetic test")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    return counter


# acceptance reporting: one line per criterion, echoed again in the session summary

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    status, detail = "PASS", ""
    try:
        yield
    except pytest.skip.Exception as exc:
        status, detail = "SKIP", str(exc)
        raise
    except BaseException as exc:
        status, detail = "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        ACCEPTANCE[number] = (title, status, detail)
        print(f"criterion {number:>2} {status}: {title}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}" + (f" ({detail})" if detail else ""))
