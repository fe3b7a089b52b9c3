"""Snippet execution: one fresh process in one fresh directory per request.

Interpreter state is never shared; the only inputs are the snippet text
and the materialized files, the only outputs are the captured streams.
The deny-list is enforced inside the child via a sitecustomize hook, so
user code runs unmodified and tracebacks keep their line numbers.
"""

from __future__ import annotations

import os
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

DEFAULT_DENY = ("subprocess", "socket", "ctypes")
MEMORY_LIMIT_BYTES = 2 << 30
FILE_SIZE_LIMIT_BYTES = 64 << 20

# Rendered into the child's sitecustomize; runs before any user code.
# Resource limits are applied here, in the child, rather than through
# preexec_fn: forking a multithreaded server through Python-level
# pre-exec code can deadlock the child.
_SITECUSTOMIZE = """\
import builtins as _b
import os as _os
import resource as _resource

for _limit, _value in (("RLIMIT_CPU", {cpu_s}),
                       ("RLIMIT_AS", {memory_bytes}),
                       ("RLIMIT_FSIZE", {fsize_bytes}),
                       ("RLIMIT_NOFILE", 256)):
    _res = getattr(_resource, _limit)
    _hard = _resource.getrlimit(_res)[1]
    if _hard != _resource.RLIM_INFINITY:
        _value = min(_value, _hard)
    try:
        _resource.setrlimit(_res, (_value, _value))
    except (ValueError, OSError):
        pass  # a missed cap must not take the import guard down with it

_DENIED = {denied!r}

_real_import = _b.__import__


def _guarded_import(name, *args, **kwargs):
    if name.split(".")[0] in _DENIED:
        raise ImportError(f"module {{name.split('.')[0]!r}} is disabled "
                          "in the sandbox")
    return _real_import(name, *args, **kwargs)


_b.__import__ = _guarded_import


def _blocked(*args, **kwargs):
    raise PermissionError("process spawning is disabled in the sandbox")


for _name in ("system", "popen", "fork", "forkpty", "execv", "execve",
              "execvp", "execvpe", "spawnl", "spawnv", "spawnve",
              "posix_spawn", "posix_spawnp"):
    if hasattr(_os, _name):
        setattr(_os, _name, _blocked)
"""


@dataclass(frozen=True)
class ExecutionOutcome:
    stdout: str
    stderr: str
    exit_code: int
    duration_ms: int
    timed_out: bool
    truncated: bool


def _materialize(workdir: str, files: dict) -> None:
    for name, data in files.items():
        path = os.path.join(workdir, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)


def _capped(data: bytes, cap: int) -> tuple[str, bool]:
    truncated = len(data) > cap
    return data[:cap].decode("utf-8", "replace"), truncated


def run_snippet(code: str, timeout_s: float, files: dict, stdout_cap: int,
                deny: tuple = DEFAULT_DENY) -> ExecutionOutcome:
    """Blocking; callers gate concurrency.  files maps validated relative
    names to raw bytes."""
    with tempfile.TemporaryDirectory(prefix="sandbox-") as workdir:
        _materialize(workdir, files)
        with open(os.path.join(workdir, "sitecustomize.py"), "w",
                  encoding="utf-8") as fh:
            fh.write(_SITECUSTOMIZE.format(denied=tuple(deny),
                                           cpu_s=int(timeout_s) + 2,
                                           memory_bytes=MEMORY_LIMIT_BYTES,
                                           fsize_bytes=FILE_SIZE_LIMIT_BYTES))
        with open(os.path.join(workdir, "main.py"), "w", encoding="utf-8") as fh:
            fh.write(code)

        env = {"PATH": os.environ.get("PATH", "/usr/bin:/bin"),
               "PYTHONPATH": workdir, "HOME": workdir, "LANG": "C.UTF-8",
               "PYTHONDONTWRITEBYTECODE": "1"}
        started = time.perf_counter()
        proc = subprocess.Popen([sys.executable, "main.py"], cwd=workdir,
                                stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                env=env, start_new_session=True)
        timed_out = False
        try:
            out, err = proc.communicate(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            out, err = proc.communicate()
        duration_ms = int((time.perf_counter() - started) * 1000)

        exit_code = proc.returncode
        if timed_out and exit_code == 0:
            exit_code = 124  # timeout must never look like success
        stdout, out_cut = _capped(out or b"", stdout_cap)
        stderr, err_cut = _capped(err or b"", stdout_cap)
        return ExecutionOutcome(stdout, stderr, exit_code, duration_ms,
                                timed_out, out_cut or err_cut)
