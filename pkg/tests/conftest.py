import os
import socket
import subprocess
import sys
import time

import pytest
from hypothesis import HealthCheck, settings

from notibus import Broker
from notibus.wire import ServerThread

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def server(tmp_path):
    """Broker served from a background thread of this process."""
    with ServerThread(Broker(tmp_path / "data", fsync=False)) as st:
        yield st


class BrokerProcess:
    def __init__(self, data_dir, port=None, extra=("--log-level", "warn")):
        self.port = port or free_port()
        self.data_dir = data_dir
        self.extra = list(extra)
        self.proc = None

    @property
    def address(self):
        return ("127.0.0.1", self.port)

    def start(self, timeout=10.0):
        cmd = [
            sys.executable, "-m", "notibus.wire",
            "--listen", f"127.0.0.1:{self.port}",
            "--data-dir", str(self.data_dir),
            "--no-fsync",
            *self.extra,
        ]
        # stderr goes to a file: a pipe nobody drains would stall a chatty broker
        self.log_path = f"{self.data_dir}.log"
        with open(self.log_path, "ab") as log:
            self.proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=log)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                raise RuntimeError(f"broker exited: {self.stderr_text()}")
            try:
                socket.create_connection(self.address, timeout=0.2).close()
                return self
            except OSError:
                time.sleep(0.05)
        raise RuntimeError("broker did not start")

    def stop(self):
        if self.proc is not None and self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def kill(self):
        self.proc.kill()
        self.proc.wait()

    def alive(self):
        return self.proc is not None and self.proc.poll() is None

    def stderr_text(self):
        with open(self.log_path, errors="replace") as f:
            return f.read()


@pytest.fixture
def broker_process(tmp_path):
    """Broker running as a separate notibusd process, as in deployment."""
    bp = BrokerProcess(tmp_path / "data").start()
    yield bp
    bp.stop()


@pytest.fixture(scope="module")
def shared_broker_process(tmp_path_factory):
    bp = BrokerProcess(tmp_path_factory.mktemp("broker") / "data").start()
    yield bp
    bp.stop()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
