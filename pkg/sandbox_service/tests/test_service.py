import base64
import threading
import time

import pytest

from sandbox_service import __version__
from tests.conftest import execute, make_client


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class TestExecuteBasics:
    def test_arithmetic(self, client):
        result = execute(client, "print(2 + 2)")
        assert result["stdout"] == "4\n"
        assert result["exit_code"] == 0
        assert result["stderr"] == ""
        assert result["timed_out"] is False
        assert result["truncated"] is False
        assert result["duration_ms"] >= 0

    def test_snippet_failure_is_a_200(self, client):
        result = execute(client, "raise RuntimeError('boom')")
        assert result["exit_code"] != 0
        assert "RuntimeError: boom" in result["stderr"]
        assert "main.py" in result["stderr"]  # traceback points at the snippet

    def test_stderr_and_stdout_are_separate(self, client):
        result = execute(client, "import sys\n"
                                 "print('out')\n"
                                 "print('err', file=sys.stderr)")
        assert result["stdout"] == "out\n" and result["stderr"] == "err\n"

    def test_deterministic_snippets_are_stable(self, client):
        code = "print(sum(range(100)))"
        first = execute(client, code)
        second = execute(client, code)
        assert (first["stdout"], first["exit_code"]) == \
            (second["stdout"], second["exit_code"]) == ("4950\n", 0)


class TestTimeouts:
    def test_busy_loop_is_killed(self, client):
        started = time.monotonic()
        result = execute(client, "while True:\n    pass", timeout_s=1)
        wall = time.monotonic() - started
        assert result["timed_out"] is True
        assert result["exit_code"] != 0
        assert wall < 1.5

    def test_sleep_within_timeout_succeeds(self, client):
        result = execute(client, "import time\ntime.sleep(0.05)\nprint('ok')",
                         timeout_s=5)
        assert result["timed_out"] is False and result["exit_code"] == 0


class TestOutputCaps:
    def test_stdout_capped_with_flag(self, client):
        result = execute(client, "print('x' * 100000)", stdout_cap=1000)
        assert len(result["stdout"].encode()) == 1000
        assert result["stdout"] == "x" * 1000
        assert result["truncated"] is True

    def test_under_cap_not_flagged(self, client):
        result = execute(client, "print('tiny')", stdout_cap=1000)
        assert result["truncated"] is False

    def test_stderr_counts_toward_truncation(self, client):
        result = execute(client, "import sys\n"
                                 "sys.stderr.write('e' * 5000)",
                         stdout_cap=100)
        assert len(result["stderr"]) == 100
        assert result["truncated"] is True

    def test_default_cap_applies(self, client):
        result = execute(client, "print('y' * 200000)")
        assert len(result["stdout"].encode()) == 65536
        assert result["truncated"] is True


class TestFiles:
    def test_materialized_into_working_directory(self, client):
        result = execute(client, "print(open('data.txt').read())",
                         files={"data.txt": b64(b"hello files")})
        assert result["stdout"] == "hello files\n"
        assert result["exit_code"] == 0

    def test_nested_relative_paths(self, client):
        result = execute(client, "print(open('sub/dir/f.txt').read())",
                         files={"sub/dir/f.txt": b64(b"nested")})
        assert result["stdout"] == "nested\n"

    def test_list_shaped_files_accepted(self, client):
        result = execute(client, "print(open('a.bin', 'rb').read())",
                         files=[{"name": "a.bin", "content": b64(b"\x00\x01")}])
        assert result["stdout"] == "b'\\x00\\x01'\n"

    def test_binary_round_trip(self, client):
        payload = bytes(range(256))
        result = execute(client,
                         "import sys\nsys.stdout.buffer.write(open('b', 'rb').read())",
                         files={"b": b64(payload)})
        assert result["exit_code"] == 0
        # replacement decoding keeps the length observable even when the
        # bytes are not valid utf-8
        assert len(result["stdout"]) == 256


class TestValidation:
    @pytest.mark.parametrize("body,fragment", [
        ({}, "code"),
        ({"code": ""}, "code"),
        ({"code": "   "}, "code"),
        ({"code": 42}, "code"),
        ({"code": "print(1)", "timeout_s": 0}, "timeout_s"),
        ({"code": "print(1)", "timeout_s": -1}, "timeout_s"),
        ({"code": "print(1)", "timeout_s": 121}, "timeout_s"),
        ({"code": "print(1)", "timeout_s": "fast"}, "timeout_s"),
        ({"code": "print(1)", "timeout_s": True}, "timeout_s"),
        ({"code": "print(1)", "stdout_cap": 0}, "stdout_cap"),
        ({"code": "print(1)", "stdout_cap": "big"}, "stdout_cap"),
        ({"code": "print(1)", "files": {"../escape.txt": "aGk="}}, "traversal"),
        ({"code": "print(1)", "files": {"a/../../up.txt": "aGk="}}, "traversal"),
        ({"code": "print(1)", "files": {"/etc/passwd": "aGk="}}, "absolute"),
        ({"code": "print(1)", "files": {"": "aGk="}}, "non-empty"),
        ({"code": "print(1)", "files": {"f.txt": "not base64!!"}}, "base64"),
        ({"code": "print(1)", "files": {"f.txt": 7}}, "base64 text"),
        ({"code": "print(1)", "files": "f.txt"}, "mapping or a list"),
        ({"code": "print(1)", "files": [{"content": "aGk="}]}, "name"),
    ])
    def test_invalid_requests_get_400(self, client, body, fragment):
        resp = client.post("/execute", json=body)
        assert resp.status_code == 400
        assert fragment in resp.json()["detail"]

    def test_non_json_body(self, client):
        resp = client.post("/execute", content=b"not json",
                           headers={"content-type": "application/json"})
        assert resp.status_code == 400

    def test_array_body(self, client):
        resp = client.post("/execute", json=["print(1)"])
        assert resp.status_code == 400

    def test_dotted_but_safe_names_allowed(self, client):
        result = execute(client, "print(open('a..b.txt').read())",
                         files={"a..b.txt": b64(b"fine")})
        assert result["exit_code"] == 0


class TestDenyList:
    @pytest.mark.parametrize("code", [
        "import subprocess",
        "import subprocess.run",
        "import socket",
        "from socket import socket",
        "import ctypes",
    ])
    def test_denied_imports_fail(self, client, code):
        result = execute(client, code)
        assert result["exit_code"] != 0
        assert "disabled in the sandbox" in result["stderr"]

    @pytest.mark.parametrize("code", [
        "import os\nos.system('echo hi')",
        "import os\nos.fork()",
        "import os\nos.popen('ls')",
    ])
    def test_process_spawning_blocked(self, client, code):
        result = execute(client, code)
        assert result["exit_code"] != 0
        assert "disabled in the sandbox" in result["stderr"]

    def test_ordinary_stdlib_still_works(self, client):
        result = execute(client, "import json, math, os\n"
                                 "print(json.dumps({'pi': round(math.pi, 2)}))")
        assert result["exit_code"] == 0
        assert result["stdout"] == '{"pi": 3.14}\n'

    def test_deny_list_is_configurable(self):
        client = make_client(deny=())
        result = execute(client, "import subprocess\nprint('allowed')")
        assert result["exit_code"] == 0 and result["stdout"] == "allowed\n"


class TestIsolation:
    def test_fresh_directory_per_request(self, client):
        execute(client, "open('state.txt', 'w').write('leak?')")
        result = execute(client, "open('state.txt')")
        assert result["exit_code"] != 0
        assert "FileNotFoundError" in result["stderr"]

    def test_workdir_contains_only_request_files(self, client):
        result = execute(client, "import os\nprint(sorted(os.listdir()))",
                         files={"mine.txt": b64(b"x")})
        assert result["stdout"] == "['main.py', 'mine.txt', 'sitecustomize.py']\n"

    def test_interpreter_state_never_carries_over(self, client):
        execute(client, "leaked_variable = 'secret'")
        result = execute(client, "print('leaked_variable' in dir())")
        assert result["stdout"] == "False\n"


class TestCapacity:
    def test_queued_up_to_depth_then_503(self):
        client = make_client(concurrency=1, queue_depth=1)
        slow = "import time\ntime.sleep(0.8)\nprint('done')"
        responses = {}

        def fire(slot, code):
            responses[slot] = client.post("/execute",
                                          json={"code": code, "timeout_s": 5})

        threads = [threading.Thread(target=fire, args=(i, slow))
                   for i in range(2)]
        for t in threads:
            t.start()
            time.sleep(0.15)  # let each request register before the next
        # 1 running + 1 queued: the third must be turned away
        overflow = client.post("/execute", json={"code": "print('no room')"})
        assert overflow.status_code == 503
        assert "capacity" in overflow.json()["detail"]
        for t in threads:
            t.join()
        assert all(r.status_code == 200 for r in responses.values())

        # capacity frees up once work drains
        after = client.post("/execute", json={"code": "print('again')"})
        assert after.status_code == 200

    def test_health_reports_saturation(self):
        client = make_client(concurrency=1, queue_depth=4)
        slow = "import time\ntime.sleep(0.6)"
        thread = threading.Thread(
            target=lambda: client.post("/execute",
                                       json={"code": slow, "timeout_s": 5}))
        thread.start()
        time.sleep(0.2)
        health = client.get("/health").json()
        thread.join()
        assert health["concurrency"]["limit"] == 1
        assert health["concurrency"]["in_flight"] == 1


class TestHealthAndHeaders:
    def test_health_shape(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["version"] == __version__
        assert body["concurrency"]["limit"] == 4

    @pytest.mark.parametrize("request_fn", [
        lambda c: c.get("/health"),
        lambda c: c.post("/execute", json={"code": "print(1)"}),
        lambda c: c.post("/execute", json={}),
        lambda c: c.get("/nope"),
    ])
    def test_version_header_on_every_response(self, client, request_fn):
        resp = request_fn(client)
        assert resp.headers["X-Sandbox-Version"] == __version__
