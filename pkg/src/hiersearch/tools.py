"""Environment adapters: web search, page fetch, sandboxed code execution,
and media analysis.

Every adapter exists in two interchangeable flavors: a live implementation
that talks to a real provider, and a deterministic fixture implementation
backed by JSONL files, so the whole control plane runs offline in tests.
Adapter access goes through ToolInvoker, which adds an in-session cache,
bounded concurrency, duration accounting, and trace records.
"""

from __future__ import annotations

import html as html_lib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx

from .backend import count_tokens
from .trace import Tracer

DEFAULT_TOP_K = 10
MAX_TOP_K = 50
DEFAULT_REGION = "US-EN"
DEFAULT_SNIPPET_CAP = 500          # characters
DEFAULT_PAGE_TOKEN_CAP = 8000      # approximate tokens
DEFAULT_CODE_TIMEOUT_S = 60.0
MAX_CODE_TIMEOUT_S = 120.0
DEFAULT_MULTIMODAL_MODEL = "Qwen2.5-Omni-7B"


class ToolError(Exception):
    pass


class ProviderError(ToolError):
    pass


class HttpFetchError(ToolError):
    def __init__(self, url: str, status: int):
        self.url = url
        self.status = status
        super().__init__(f"fetch of {url} failed with HTTP {status}")


class NonTextContentError(ToolError):
    pass


class SandboxUnavailableError(ToolError):
    pass


class MediaUnavailableError(ToolError):
    pass


@dataclass(frozen=True)
class SearchResult:
    rank: int  # 1-based, contiguous
    title: str
    url: str
    snippet: str


@dataclass(frozen=True)
class CodeExecutionResult:
    stdout: str
    stderr: str
    exit_status: int
    duration_ms: int
    truncated: bool = False
    timed_out: bool = False


@dataclass(frozen=True)
class MediaAnalysisResult:
    answer: str
    model_id: str = DEFAULT_MULTIMODAL_MODEL


def truncate_to_tokens(text: str, max_tokens: int) -> tuple[str, bool]:
    """Cut text to roughly max_tokens using the same bytes/4 heuristic as
    count_tokens; returns (text, was_truncated)."""
    if count_tokens(text) <= max_tokens:
        return text, False
    raw = text.encode("utf-8")[: max_tokens * 4]
    return raw.decode("utf-8", "ignore"), True


def _check_search_args(query: str, top_k: int) -> None:
    if not query or not query.strip():
        raise ValueError("search query must be non-empty")
    if not (1 <= top_k <= MAX_TOP_K):
        raise ValueError(f"top_k must be in [1, {MAX_TOP_K}], got {top_k}")


# --- search -----------------------------------------------------------------


class FixtureSearchAdapter:
    """Keyed on the exact query string; unknown queries return no results
    (an empty result list is not an error)."""

    name = "search-fixture"

    def __init__(self, by_query: dict[str, list[SearchResult]] | None = None,
                 default: Callable[[str], list[SearchResult]] | None = None):
        self.by_query = dict(by_query or {})
        self.default = default
        self.calls = 0

    @classmethod
    def from_jsonl(cls, path: str) -> "FixtureSearchAdapter":
        by_query: dict[str, list[SearchResult]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                results = [SearchResult(rank=i + 1, title=r.get("title", ""),
                                        url=r.get("url", ""), snippet=r.get("snippet", ""))
                           for i, r in enumerate(obj.get("results", []))]
                by_query[obj["query"]] = results
        return cls(by_query)

    def search(self, query: str, top_k: int = DEFAULT_TOP_K,
               region: str = DEFAULT_REGION) -> list[SearchResult]:
        _check_search_args(query, top_k)
        self.calls += 1
        results = self.by_query.get(query)
        if results is None:
            results = self.default(query) if self.default else []
        results = results[:top_k]
        # re-rank so the contiguity invariant holds after truncation
        return [SearchResult(i + 1, r.title, r.url, r.snippet)
                for i, r in enumerate(results)]


_PROVIDER_PARSERS: dict[str, Callable[[dict], list[dict]]] = {
    # Bing Web Search answer shape
    "bing": lambda data: [
        {"title": v.get("name", ""), "url": v.get("url", ""), "snippet": v.get("snippet", "")}
        for v in (data.get("webPages", {}) or {}).get("value", [])
    ],
    # serper.dev style
    "serper": lambda data: [
        {"title": v.get("title", ""), "url": v.get("link", ""), "snippet": v.get("snippet", "")}
        for v in data.get("organic", [])
    ],
}


class LiveSearchAdapter:
    """Thin client for a REST search provider."""

    name = "search-live"

    def __init__(self, url: str, provider: str = "bing", *,
                 api_key_env: str | None = None, api_key_header: str = "Ocp-Apim-Subscription-Key",
                 max_retries: int = 3, backoff_s: float = 0.5,
                 client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if provider not in _PROVIDER_PARSERS:
            raise ValueError(f"unknown search provider {provider!r}")
        self.url = url
        self.provider = provider
        self.api_key_env = api_key_env
        self.api_key_header = api_key_header
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._client = client or httpx.Client(timeout=30.0)
        self._sleep = sleep
        self.calls = 0

    def _headers(self) -> dict:
        import os
        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if key:
                headers[self.api_key_header] = key
        return headers

    def search(self, query: str, top_k: int = DEFAULT_TOP_K,
               region: str = DEFAULT_REGION) -> list[SearchResult]:
        _check_search_args(query, top_k)
        self.calls += 1
        params = {"q": query, "count": top_k, "mkt": region}
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.get(self.url, params=params, headers=self._headers())
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_exc = ProviderError(f"search provider returned {resp.status_code}")
                elif resp.status_code >= 400:
                    raise ProviderError(f"search provider returned {resp.status_code}")
                else:
                    data = resp.json()
                    rows = _PROVIDER_PARSERS[self.provider](data)
                    return [SearchResult(i + 1, r["title"], r["url"], r["snippet"])
                            for i, r in enumerate(rows[:top_k])]
            except httpx.HTTPError as exc:
                last_exc = ProviderError(str(exc))
            if attempt < self.max_retries:
                self._sleep(self.backoff_s * (2 ** attempt))
        raise last_exc or ProviderError("search failed")


# --- page fetch -------------------------------------------------------------


_KILL_TAGS = re.compile(
    r"<(script|style|noscript|nav|header|footer|svg|form)\b.*?</\1\s*>",
    re.IGNORECASE | re.DOTALL)
_TAG = re.compile(r"<[^>]+>")


def extract_readable_text(html: str) -> str:
    """Heuristic readable-text extraction: drop chrome-ish elements, strip
    tags, unescape entities, collapse whitespace."""
    text = _KILL_TAGS.sub(" ", html)
    text = re.sub(r"<br\s*/?>|</p>|</div>|</li>|</h[1-6]>", "\n", text, flags=re.IGNORECASE)
    text = _TAG.sub(" ", text)
    text = html_lib.unescape(text)
    lines = [re.sub(r"[ \t]+", " ", ln).strip() for ln in text.splitlines()]
    return "\n".join(ln for ln in lines if ln)


class FixturePageAdapter:
    name = "page-fixture"

    def __init__(self, by_url: dict[str, tuple[int, str]] | None = None,
                 default: Callable[[str], str] | None = None):
        self.by_url = dict(by_url or {})
        self.default = default
        self.calls = 0

    @classmethod
    def from_jsonl(cls, path: str) -> "FixturePageAdapter":
        by_url: dict[str, tuple[int, str]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                by_url[obj["url"]] = (int(obj.get("status", 200)), obj.get("text", ""))
        return cls(by_url)

    def fetch(self, url: str) -> str:
        if not url or not url.strip():
            raise ValueError("url must be non-empty")
        self.calls += 1
        if url not in self.by_url:
            if self.default:
                return self.default(url)
            raise HttpFetchError(url, 404)
        status, text = self.by_url[url]
        if status != 200:
            raise HttpFetchError(url, status)
        return text


class LivePageAdapter:
    name = "page-live"

    def __init__(self, *, timeout_s: float = 30.0, client: httpx.Client | None = None):
        self._client = client or httpx.Client(timeout=timeout_s, follow_redirects=True)
        self.calls = 0

    def fetch(self, url: str) -> str:
        if not url or not url.strip():
            raise ValueError("url must be non-empty")
        self.calls += 1
        try:
            resp = self._client.get(url)
        except httpx.TimeoutException as exc:
            raise ToolError(f"fetch of {url} timed out") from exc
        except httpx.HTTPError as exc:
            raise ToolError(f"fetch of {url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise HttpFetchError(url, resp.status_code)
        ctype = resp.headers.get("content-type", "")
        if ctype and not any(t in ctype for t in ("text/", "html", "xml", "json")):
            raise NonTextContentError(f"{url} returned non-text content-type {ctype!r}")
        return extract_readable_text(resp.text)


# --- code execution ---------------------------------------------------------


class FixtureCodeAdapter:
    """Keyed on the exact (stripped) code string."""

    name = "code-fixture"

    def __init__(self, by_code: dict[str, CodeExecutionResult] | None = None,
                 default: Callable[[str], CodeExecutionResult] | None = None):
        self.by_code = dict(by_code or {})
        self.default = default
        self.calls = 0

    @classmethod
    def from_jsonl(cls, path: str) -> "FixtureCodeAdapter":
        by_code: dict[str, CodeExecutionResult] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                by_code[obj["code"].strip()] = CodeExecutionResult(
                    stdout=obj.get("stdout", ""), stderr=obj.get("stderr", ""),
                    exit_status=int(obj.get("exit_status", 0)),
                    duration_ms=int(obj.get("duration_ms", 1)),
                    truncated=bool(obj.get("truncated", False)),
                    timed_out=bool(obj.get("timed_out", False)))
        return cls(by_code)

    def execute(self, code: str, timeout_s: float = DEFAULT_CODE_TIMEOUT_S,
                files: dict[str, bytes] | None = None) -> CodeExecutionResult:
        _check_code_args(code, timeout_s)
        self.calls += 1
        result = self.by_code.get(code.strip())
        if result is None:
            if self.default:
                return self.default(code)
            raise SandboxUnavailableError(f"no fixture entry for code starting {code[:60]!r}")
        return result


def _check_code_args(code: str, timeout_s: float) -> None:
    if not code or not code.strip():
        raise ValueError("code must be non-empty")
    if not (0 < timeout_s <= MAX_CODE_TIMEOUT_S):
        raise ValueError(f"timeout_s must be in (0, {MAX_CODE_TIMEOUT_S}], got {timeout_s}")


class SandboxCodeAdapter:
    """Client for the sandboxed execution service wire protocol:
    POST {base_url}/execute with {code, timeout_s, files, stdout_cap}.

    Timeouts are part of the result (timed_out flag plus nonzero exit), not
    transport errors; only an unreachable or overloaded service raises.
    """

    name = "code-sandbox"

    def __init__(self, base_url: str, *, stdout_cap: int | None = None,
                 client: httpx.Client | None = None, request_timeout_s: float = 150.0):
        self.base_url = base_url.rstrip("/")
        self.stdout_cap = stdout_cap
        self._client = client or httpx.Client(timeout=request_timeout_s)
        self.calls = 0

    def execute(self, code: str, timeout_s: float = DEFAULT_CODE_TIMEOUT_S,
                files: dict[str, bytes] | None = None) -> CodeExecutionResult:
        _check_code_args(code, timeout_s)
        self.calls += 1
        body: dict = {"code": code, "timeout_s": timeout_s}
        if files:
            import base64
            body["files"] = {name: base64.b64encode(data).decode("ascii")
                             for name, data in files.items()}
        if self.stdout_cap is not None:
            body["stdout_cap"] = self.stdout_cap
        try:
            resp = self._client.post(self.base_url + "/execute", json=body)
        except httpx.HTTPError as exc:
            raise SandboxUnavailableError(f"sandbox unreachable: {exc}") from exc
        if resp.status_code == 503:
            raise SandboxUnavailableError("sandbox at capacity")
        if resp.status_code != 200:
            raise ToolError(f"sandbox rejected request: HTTP {resp.status_code}: "
                            f"{resp.text[:300]}")
        data = resp.json()
        return CodeExecutionResult(
            stdout=data.get("stdout", ""), stderr=data.get("stderr", ""),
            exit_status=int(data.get("exit_code", 1)),
            duration_ms=int(data.get("duration_ms", 0)),
            truncated=bool(data.get("truncated", False)),
            timed_out=bool(data.get("timed_out", False)))


# --- media analysis ---------------------------------------------------------


def _check_media_args(path: str, question: str) -> None:
    if not path or not path.strip():
        raise ValueError("media path must be non-empty")
    if not question or not question.strip():
        raise ValueError("media question must be non-empty")


class FixtureMediaAdapter:
    """Keyed on the exact (path, question) pair."""

    name = "media-fixture"

    def __init__(self, by_key: dict[tuple[str, str], MediaAnalysisResult] | None = None,
                 default: Callable[[str, str], MediaAnalysisResult] | None = None):
        self.by_key = dict(by_key or {})
        self.default = default
        self.calls = 0

    @classmethod
    def from_jsonl(cls, path: str) -> "FixtureMediaAdapter":
        by_key: dict[tuple[str, str], MediaAnalysisResult] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                by_key[(obj["path"], obj["question"])] = MediaAnalysisResult(
                    answer=obj["answer"],
                    model_id=obj.get("model_id", DEFAULT_MULTIMODAL_MODEL))
        return cls(by_key)

    def analyze(self, path: str, question: str) -> MediaAnalysisResult:
        _check_media_args(path, question)
        self.calls += 1
        result = self.by_key.get((path, question))
        if result is None:
            if self.default:
                return self.default(path, question)
            raise MediaUnavailableError(f"no fixture entry for {path!r}")
        return result


class LiveMediaAdapter:
    """Sends (media path, question) to a multimodal chat endpoint."""

    name = "media-live"

    def __init__(self, url: str, model: str = DEFAULT_MULTIMODAL_MODEL, *,
                 api_key_env: str | None = None, client: httpx.Client | None = None):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=120.0)
        self.calls = 0

    def analyze(self, path: str, question: str) -> MediaAnalysisResult:
        _check_media_args(path, question)
        self.calls += 1
        import os
        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "file", "file": {"path": path}},
                    {"type": "text", "text": question},
                ],
            }],
        }
        try:
            resp = self._client.post(self.url + "/chat/completions", json=body,
                                     headers=headers)
        except httpx.HTTPError as exc:
            raise MediaUnavailableError(f"multimodal endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise MediaUnavailableError(f"multimodal endpoint returned {resp.status_code}")
        data = resp.json()
        try:
            answer = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise MediaUnavailableError(f"unexpected multimodal response: {exc}") from exc
        return MediaAnalysisResult(answer=answer, model_id=self.model)


# --- rendering --------------------------------------------------------------


def render_search_results(results: Sequence[SearchResult],
                          snippet_cap: int = DEFAULT_SNIPPET_CAP) -> str:
    if not results:
        return "No results found."
    parts = []
    for r in results:
        snippet = r.snippet[:snippet_cap]
        parts.append(f"Document {r.rank}: {r.title}\nURL: {r.url}\nSnippet: {snippet}")
    return "\n\n".join(parts)


def render_code_result(res: CodeExecutionResult) -> str:
    lines = [f"Execution result (exit {res.exit_status}, {res.duration_ms} ms):"]
    if res.timed_out:
        lines.append("[execution timed out]")
    if res.stdout:
        lines.append(res.stdout.rstrip("\n"))
    if res.stderr:
        lines.append("--- stderr ---")
        lines.append(res.stderr.rstrip("\n"))
    if not res.stdout and not res.stderr:
        lines.append("(no output)")
    if res.truncated:
        lines.append("[output truncated]")
    return "\n".join(lines)


# --- invoker ----------------------------------------------------------------


@dataclass(frozen=True)
class ToolCallResult:
    text: str
    ok: bool
    duration_ms: int
    cached: bool = False


def _norm_ws(text: str) -> str:
    return " ".join(text.split())


class ToolInvoker:
    """Session-scoped front door for all adapter calls.

    Adds an in-session cache keyed on (adapter op, normalized request),
    bounded per-adapter concurrency, duration measurement, and one
    tool_call/tool_result trace pair per invocation.  Tool failures are
    turned into not-ok results so expert loops can continue.
    """

    def __init__(self, *, search=None, page=None, code=None, media=None,
                 tracer: Tracer | None = None,
                 snippet_cap: int = DEFAULT_SNIPPET_CAP,
                 page_token_cap: int = DEFAULT_PAGE_TOKEN_CAP,
                 top_k: int = DEFAULT_TOP_K, region: str = DEFAULT_REGION,
                 code_timeout_s: float = DEFAULT_CODE_TIMEOUT_S,
                 max_concurrent: int = 4,
                 clock: Callable[[], float] = time.monotonic):
        self.search_adapter = search
        self.page_adapter = page
        self.code_adapter = code
        self.media_adapter = media
        self.tracer = tracer
        self.snippet_cap = snippet_cap
        self.page_token_cap = page_token_cap
        self.top_k = top_k
        self.region = region
        self.code_timeout_s = code_timeout_s
        self.current_expert = ""
        self._clock = clock
        self._cache: dict[tuple, ToolCallResult] = {}
        self._sems: dict[int, threading.BoundedSemaphore] = {}
        self._max_concurrent = max_concurrent
        self._lock = threading.Lock()

    def _sem_for(self, adapter) -> threading.BoundedSemaphore:
        with self._lock:
            key = id(adapter)
            if key not in self._sems:
                self._sems[key] = threading.BoundedSemaphore(self._max_concurrent)
            return self._sems[key]

    def _invoke(self, op: str, key: tuple, adapter, call: Callable[[], tuple[str, bool]],
                trace_args: dict) -> ToolCallResult:
        if adapter is None:
            raise ToolError(f"no adapter configured for {op}")
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            cached = ToolCallResult(hit.text, hit.ok, 0, cached=True)
            if self.tracer:
                self.tracer.emit("tool_call", op=op, expert=self.current_expert,
                                 cached=True, **trace_args)
                self.tracer.emit("tool_result", op=op, expert=self.current_expert,
                                 ok=cached.ok, duration_ms=0, cached=True)
            return cached
        if self.tracer:
            self.tracer.emit("tool_call", op=op, expert=self.current_expert,
                             cached=False, **trace_args)
        start = self._clock()
        try:
            with self._sem_for(adapter):
                text, ok = call()
        except (ToolError, ValueError) as exc:
            text, ok = f"Tool call failed: {exc}", False
        duration_ms = max(0, int((self._clock() - start) * 1000))
        result = ToolCallResult(text, ok, duration_ms)
        with self._lock:
            self._cache[key] = result
        if self.tracer:
            self.tracer.emit("tool_result", op=op, expert=self.current_expert,
                             ok=ok, duration_ms=duration_ms, cached=False,
                             chars=len(text))
        return result

    def search(self, query: str, top_k: int | None = None) -> ToolCallResult:
        k = top_k or self.top_k
        key = ("search", _norm_ws(query), k, self.region)

        def call() -> tuple[str, bool]:
            results = self.search_adapter.search(query, top_k=k, region=self.region)
            return render_search_results(results, self.snippet_cap), True

        return self._invoke("search", key, self.search_adapter, call,
                            {"query": query, "top_k": k})

    def visit(self, url: str) -> ToolCallResult:
        key = ("visit", url.strip())

        def call() -> tuple[str, bool]:
            text = self.page_adapter.fetch(url.strip())
            capped, truncated = truncate_to_tokens(text, self.page_token_cap)
            body = f"Page content from {url.strip()}:\n{capped}"
            if truncated:
                body += "\n[page truncated]"
            return body, True

        return self._invoke("visit", key, self.page_adapter, call, {"url": url.strip()})

    def code(self, code: str) -> ToolCallResult:
        key = ("code", code.strip())

        def call() -> tuple[str, bool]:
            res = self.code_adapter.execute(code, timeout_s=self.code_timeout_s)
            ok = res.exit_status == 0 and not res.timed_out
            return render_code_result(res), ok

        return self._invoke("code", key, self.code_adapter, call,
                            {"code": code.strip()[:500]})

    def media(self, path: str, question: str) -> ToolCallResult:
        key = ("media", path.strip(), _norm_ws(question))

        def call() -> tuple[str, bool]:
            res = self.media_adapter.analyze(path.strip(), question)
            return res.answer, True

        return self._invoke("media", key, self.media_adapter, call,
                            {"path": path.strip(), "question": question})
