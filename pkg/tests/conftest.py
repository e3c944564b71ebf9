from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from apgp.prompts import default_templates
from apgp.provider import ScriptedProvider

FIXTURES = Path(__file__).parent / "fixtures"

THREE = "SOLUTION 1: alpha plan\nSOLUTION 2: beta plan\nSOLUTION 3: gamma plan"

BASE_SCRIPT = {
    "define": "P_DEF: abstract restatement",
    "generate": THREE,
    "aggregate": "S_BEST: merged plan",
    "answer": "ANS: first answer",
}
SUCCESS_SCRIPT = BASE_SCRIPT | {"validate": "VERDICT: SUCCESS the answer holds"}
FAIL_SCRIPT = BASE_SCRIPT | {
    "validate": "VERDICT: FAIL wrong unit\nREVISED SOLUTION: S_FINAL: use metres",
    "reanswer": "ANS_FINAL: retried answer",
}
UNPARSEABLE_SCRIPT = BASE_SCRIPT | {"validate": "I think it's fine."}


def scripted(data: dict) -> ScriptedProvider:
    return ScriptedProvider.from_dict(data)


@pytest.fixture(scope="session")
def en_pack():
    return default_templates("en")


@pytest.fixture(scope="session")
def zh_pack():
    return default_templates("zh")


class StubServer:
    """Chat-completions stub that replays a queue of (status, body) replies."""

    def __init__(self):
        self.replies: list[tuple[int, object]] = []
        self.requests: list[dict] = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with stub.lock:
                    stub.requests.append({"body": body, "headers": dict(self.headers)})
                    status, payload = stub.replies.pop(0) if stub.replies else (200, ok_body("default"))
                raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.01}, daemon=True)
        self.thread.start()

    @property
    def hits(self) -> int:
        return len(self.requests)

    def close(self):
        self.server.shutdown()
        self.server.server_close()


def ok_body(content: str) -> dict:
    return {
        "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3},
    }


@pytest.fixture
def stub():
    server = StubServer()
    yield server
    server.close()


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        prev = _ACCEPTANCE.get(n)
        if prev is None or prev[0] == "PASS" or status == "FAIL":
            _ACCEPTANCE[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")
