"""HTTP surface: request validation, capacity gating, version header.

Execution failures are 200s with a nonzero exit_code; only invalid
requests (400) and saturation (503) are transport-level errors.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .runner import DEFAULT_DENY, run_snippet

MAX_TIMEOUT_S = 120.0
DEFAULT_TIMEOUT_S = 60.0
DEFAULT_STDOUT_CAP = 65536


@dataclass(frozen=True)
class Settings:
    concurrency: int = 4
    queue_depth: int = 8
    deny: tuple = DEFAULT_DENY
    default_stdout_cap: int = DEFAULT_STDOUT_CAP

    @classmethod
    def from_env(cls) -> "Settings":
        deny_env = os.environ.get("SANDBOX_DENY")
        return cls(
            concurrency=int(os.environ.get("SANDBOX_CONCURRENCY", "4")),
            queue_depth=int(os.environ.get("SANDBOX_QUEUE_DEPTH", "8")),
            deny=tuple(d.strip() for d in deny_env.split(",") if d.strip())
            if deny_env is not None else DEFAULT_DENY)


class ValidationFailure(Exception):
    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(detail)


def _safe_filename(name) -> str:
    if not isinstance(name, str) or not name.strip():
        raise ValidationFailure("files: names must be non-empty strings")
    if os.path.isabs(name):
        raise ValidationFailure(f"files: absolute path {name!r} not allowed")
    norm = os.path.normpath(name)
    if norm.startswith("..") or os.path.isabs(norm):
        raise ValidationFailure(f"files: path traversal in {name!r}")
    return norm


def _decode_file(name: str, content) -> bytes:
    if not isinstance(content, str):
        raise ValidationFailure(f"files: {name!r} content must be base64 text")
    try:
        return base64.b64decode(content, validate=True)
    except (binascii.Error, ValueError):
        raise ValidationFailure(f"files: {name!r} is not valid base64") from None


def _parse_files(obj) -> dict:
    # the client sends a mapping; a list of {name, content} rows is
    # accepted as an equivalent spelling
    if obj is None:
        return {}
    files: dict = {}
    if isinstance(obj, dict):
        items = obj.items()
    elif isinstance(obj, list):
        items = []
        for row in obj:
            if not isinstance(row, dict) or "name" not in row:
                raise ValidationFailure("files: list entries need name and content")
            items.append((row["name"], row.get("content")))
    else:
        raise ValidationFailure("files: must be a mapping or a list")
    for name, content in items:
        files[_safe_filename(name)] = _decode_file(name, content)
    return files


@dataclass
class ExecuteParams:
    code: str
    timeout_s: float
    files: dict = field(default_factory=dict)
    stdout_cap: int = DEFAULT_STDOUT_CAP


def parse_execute_request(obj, default_stdout_cap: int) -> ExecuteParams:
    if not isinstance(obj, dict):
        raise ValidationFailure("request body must be a JSON object")
    code = obj.get("code")
    if not isinstance(code, str) or not code.strip():
        raise ValidationFailure("code: required non-empty string")
    timeout_s = obj.get("timeout_s", DEFAULT_TIMEOUT_S)
    if isinstance(timeout_s, bool) or not isinstance(timeout_s, (int, float)):
        raise ValidationFailure("timeout_s: must be a number")
    if not (0 < float(timeout_s) <= MAX_TIMEOUT_S):
        raise ValidationFailure(
            f"timeout_s: must be in (0, {MAX_TIMEOUT_S:g}], got {timeout_s}")
    stdout_cap = obj.get("stdout_cap", default_stdout_cap)
    if isinstance(stdout_cap, bool) or not isinstance(stdout_cap, int) \
            or stdout_cap < 1:
        raise ValidationFailure("stdout_cap: must be a positive integer")
    return ExecuteParams(code, float(timeout_s), _parse_files(obj.get("files")),
                         stdout_cap)


def create_app(settings: Settings | None = None) -> FastAPI:
    settings = settings or Settings.from_env()
    app = FastAPI(title="sandbox-service", version=__version__)
    # Gating uses thread primitives, not event-loop ones: the work is
    # blocking anyway, and this keeps behavior independent of which loop
    # a request happens to land on.
    admit = threading.Lock()
    gate = threading.Semaphore(settings.concurrency)
    pool = ThreadPoolExecutor(
        max_workers=settings.concurrency + settings.queue_depth,
        thread_name_prefix="sandbox-exec")
    state = {"in_flight": 0}

    def gated_run(params: ExecuteParams):
        with gate:
            return run_snippet(params.code, params.timeout_s, params.files,
                               params.stdout_cap, settings.deny)

    @app.middleware("http")
    async def version_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-Sandbox-Version"] = __version__
        return response

    @app.get("/health")
    async def health():
        return {"status": "ok", "version": __version__,
                "concurrency": {"limit": settings.concurrency,
                                "queue_depth": settings.queue_depth,
                                "in_flight": state["in_flight"]}}

    @app.post("/execute")
    async def execute(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"detail": "request body must be JSON"},
                                status_code=400)
        try:
            params = parse_execute_request(body, settings.default_stdout_cap)
        except ValidationFailure as exc:
            return JSONResponse({"detail": exc.detail}, status_code=400)

        with admit:
            if state["in_flight"] >= settings.concurrency + settings.queue_depth:
                return JSONResponse({"detail": "sandbox at capacity"},
                                    status_code=503)
            state["in_flight"] += 1
        try:
            outcome = await asyncio.get_running_loop().run_in_executor(
                pool, partial(gated_run, params))
        finally:
            with admit:
                state["in_flight"] -= 1
        return {"stdout": outcome.stdout, "stderr": outcome.stderr,
                "exit_code": outcome.exit_code,
                "duration_ms": outcome.duration_ms,
                "timed_out": outcome.timed_out, "truncated": outcome.truncated}

    return app


app = create_app()
