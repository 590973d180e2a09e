import socket
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
PIPELINES = ROOT / "pipelines"


class NetworkBlocked(RuntimeError):
    pass


def _refuse(*args, **kwargs):
    raise NetworkBlocked(f"network access attempted: {args[1:] or kwargs}")


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Every test runs with outbound connections disabled."""
    monkeypatch.setattr(socket.socket, "connect", _refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", _refuse)
    monkeypatch.setattr(socket, "create_connection", _refuse)
    monkeypatch.setattr(socket, "getaddrinfo", _refuse)


def failing_transport(url, headers, body):
    raise NetworkBlocked(f"transport called for {url}")


@pytest.fixture
def notes_path() -> Path:
    return FIXTURES / "clinical_notes.txt"


@pytest.fixture
def circuit_path() -> Path:
    return FIXTURES / "circuit.json"


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
