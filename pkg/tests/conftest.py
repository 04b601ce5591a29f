"""Shared fixtures: hermetic network guard and acceptance reporting."""

import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_REAL_SOCKET = socket.socket


class _GuardedSocket(socket.socket):
    """Refuses outbound connections so tests stay hermetic."""

    def connect(self, address):  # pragma: no cover - guard trips on misuse
        raise RuntimeError(f"network access blocked in tests: connect{address!r}")

    def connect_ex(self, address):  # pragma: no cover
        raise RuntimeError(f"network access blocked in tests: connect_ex{address!r}")


@pytest.fixture
def no_network(monkeypatch):
    """Blocks real socket connections for the duration of a test."""
    monkeypatch.setattr(socket, "socket", _GuardedSocket)
    yield
    monkeypatch.setattr(socket, "socket", _REAL_SOCKET)


@pytest.fixture
def fixture_dir() -> Path:
    root = Path(__file__).parent.parent / "fixtures" / "imagery"
    if not (root / "nodes.json").exists():
        pytest.skip("fixture imagery not generated; run scripts/make_fixtures.py")
    return root


@pytest.fixture
def demo_scene_path() -> Path:
    path = Path(__file__).parent.parent / "fixtures" / "demo_scene.json"
    if not path.exists():
        pytest.skip("demo scene not generated; run scripts/make_fixtures.py")
    return path


_ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_acceptance(criterion: str, passed: bool) -> None:
    _ACCEPTANCE_RESULTS[criterion] = "PASS" if passed else "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion in sorted(_ACCEPTANCE_RESULTS):
        verdict = _ACCEPTANCE_RESULTS[criterion]
        terminalreporter.write_line(f"[{verdict}] {criterion}")
