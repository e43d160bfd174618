import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from promptrl.text import TokenizerSpec


@pytest.fixture(scope="session")
def spec():
    return TokenizerSpec()


def write_vocab(path, tokens, merges=()):
    lines = list(tokens)
    if merges:
        lines.append("#merges")
        lines += [f"{a} {b}" for a, b in merges]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class FakeCompletions:
    """Minimal OpenAI-compatible /v1/completions server for tests.

    ``script`` is a list of (status, body) pairs consumed per request; once it
    is exhausted ``default`` answers. ``responder(body) -> text`` computes the
    completion text for 200 replies without a scripted body.
    """

    def __init__(self, responder=None, delay=0.0):
        self.responder = responder or (lambda body: "ok " + body["prompt"][-12:])
        self.delay = delay
        self.script = []
        self.requests = []
        self.headers = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.lock = threading.Lock()
        fake = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                with fake.lock:
                    fake.requests.append(body)
                    fake.headers.append(dict(self.headers))
                    fake.in_flight += 1
                    fake.max_in_flight = max(fake.max_in_flight, fake.in_flight)
                    step = fake.script.pop(0) if fake.script else None
                try:
                    if fake.delay:
                        time.sleep(fake.delay)
                    if step is None:
                        status, payload = 200, None
                    else:
                        status, payload = step
                    if status == "sleep":
                        time.sleep(payload)
                        status, payload = 200, None
                    if payload is None:
                        payload = {"choices": [{"text": fake.responder(body)}]}
                    data = json.dumps(payload).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass
                finally:
                    with fake.lock:
                        fake.in_flight -= 1

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def base_url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def fake_server():
    with FakeCompletions() as srv:
        yield srv


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
