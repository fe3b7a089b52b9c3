"""Generation backends.

Everything that touches a language model goes through the Backend
interface so the whole control plane can be driven deterministically by
ScriptedBackend in tests, and by an OpenAI-style chat-completions
endpoint in live runs.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import httpx

DEFAULT_CONTEXT_BUDGET = 131072
DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_S = 0.5


class BackendError(Exception):
    pass


class ConnectionFailedError(BackendError):
    pass


class RateLimitedError(BackendError):
    def __init__(self, retry_after: float | None = None):
        self.retry_after = retry_after
        super().__init__("rate limited by backend" +
                         (f" (retry after {retry_after}s)" if retry_after else ""))


class ContextOverflowError(BackendError):
    def __init__(self, prompt_tokens: int, budget: int):
        self.prompt_tokens = prompt_tokens
        self.budget = budget
        super().__init__(f"prompt is {prompt_tokens} tokens, context budget is {budget}")


class MalformedResponseError(BackendError):
    pass


class AbortedError(BackendError):
    pass


def count_tokens(text: str) -> int:
    """Heuristic token count: ceil(utf-8 bytes / 4).  Exact counts are not
    needed anywhere; budgets and reports only require a monotone,
    deterministic estimate."""
    if not text:
        return 0
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass(frozen=True)
class Message:
    role: str
    content: str


def render_messages(messages: Sequence[Message]) -> str:
    """Canonical flat rendering, used for token counting and for matching
    scripted rules against the prompt."""
    return "\n".join(f"[{m.role}]\n{m.content}" for m in messages)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    top_k: int = 20
    max_new_tokens: int = 8192

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[Message, ...]
    sampling: SamplingParams = SamplingParams()
    stop_sequences: tuple[str, ...] = ()
    stream: bool = False

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request must contain at least one message")
        for s in self.stop_sequences:
            if not s:
                raise ValueError("stop sequences must be non-empty")

    def rendered_prompt(self) -> str:
        return render_messages(self.messages)


def make_request(messages: Sequence[Message | tuple[str, str]],
                 sampling: SamplingParams | None = None,
                 stop_sequences: Sequence[str] = (),
                 stream: bool = False) -> GenerationRequest:
    norm = tuple(m if isinstance(m, Message) else Message(*m) for m in messages)
    return GenerationRequest(messages=norm,
                             sampling=sampling or SamplingParams(),
                             stop_sequences=tuple(stop_sequences),
                             stream=stream)


@dataclass(frozen=True)
class FinishReason:
    kind: str  # "stop" | "length" | "error"
    matched: str | None = None  # the stop sequence that fired, when known

    @classmethod
    def stop(cls, matched: str | None = None) -> "FinishReason":
        return cls("stop", matched)

    @classmethod
    def length(cls) -> "FinishReason":
        return cls("length")

    @classmethod
    def error(cls, detail: str | None = None) -> "FinishReason":
        return cls("error", detail)


@dataclass(frozen=True)
class GenerationChunk:
    text_delta: str
    finish_reason: FinishReason | None = None  # set only on the final chunk


@dataclass(frozen=True)
class UsageReport:
    prompt_tokens: int
    output_tokens: int
    source: str  # "backend_reported" | "approximated"


BACKEND_REPORTED = "backend_reported"
APPROXIMATED = "approximated"


class GenerationStream:
    """Iterator of GenerationChunk.  text, finish and usage are valid once
    the stream is exhausted."""

    def __init__(self, source: Iterator[GenerationChunk]):
        self._source = source
        self._parts: list[str] = []
        self.finish: FinishReason | None = None
        self.usage: UsageReport | None = None

    def __iter__(self) -> "GenerationStream":
        return self

    def __next__(self) -> GenerationChunk:
        chunk = next(self._source)
        self._parts.append(chunk.text_delta)
        if chunk.finish_reason is not None:
            self.finish = chunk.finish_reason
        return chunk

    @property
    def text(self) -> str:
        return "".join(self._parts)


@dataclass(frozen=True)
class Completion:
    text: str
    finish: FinishReason
    usage: UsageReport


class Backend:
    """Base class; subclasses implement generate()."""

    name = "backend"
    context_budget = DEFAULT_CONTEXT_BUDGET

    def generate(self, request: GenerationRequest) -> GenerationStream:
        raise NotImplementedError

    def complete(self, request: GenerationRequest) -> Completion:
        stream = self.generate(request)
        for _ in stream:
            pass
        finish = stream.finish or FinishReason.stop()
        usage = stream.usage or UsageReport(count_tokens(request.rendered_prompt()),
                                            count_tokens(stream.text), APPROXIMATED)
        return Completion(stream.text, finish, usage)

    def check_context(self, request: GenerationRequest) -> int:
        prompt_tokens = count_tokens(request.rendered_prompt())
        if prompt_tokens > self.context_budget:
            raise ContextOverflowError(prompt_tokens, self.context_budget)
        return prompt_tokens


def _apply_stops(text: str, stops: Sequence[str]) -> tuple[str, str | None]:
    """Cut text at the earliest stop-sequence occurrence.  The matched stop
    is excluded from the text and returned separately."""
    best_idx, best_stop = None, None
    for s in stops:
        idx = text.find(s)
        if idx != -1 and (best_idx is None or idx < best_idx):
            best_idx, best_stop = idx, s
    if best_idx is None:
        return text, None
    return text[:best_idx], best_stop


@dataclass
class ScriptRule:
    match: str
    response: str
    finish: str = "stop"  # "stop" | "length"
    regex: bool = False
    times: int | None = None  # fire at most N times, then fall through

    def matches(self, prompt: str) -> bool:
        if self.regex:
            return re.search(self.match, prompt, re.DOTALL) is not None
        return self.match in prompt


class ScriptedBackend(Backend):
    """Deterministic playback backend driven by an ordered rule list.

    The first rule whose match (substring, or regex with regex=true) hits
    the rendered prompt fires.  Stop sequences are applied to the scripted
    response exactly as a live backend would: text halts before the
    earliest stop, which is reported in the finish reason.  Identical call
    sequences replay bit-identically.
    """

    def __init__(self, rules: Sequence[ScriptRule], *, name: str = "scripted",
                 chunk_size: int = 17, context_budget: int = DEFAULT_CONTEXT_BUDGET):
        self.rules = list(rules)
        self.name = name
        self.chunk_size = chunk_size
        self.context_budget = context_budget
        self._fired: dict[int, int] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_jsonl(cls, path: str, **kwargs) -> "ScriptedBackend":
        rules = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedResponseError(f"{path}:{lineno}: bad rule: {exc}") from exc
                if "match" not in obj or "response" not in obj:
                    raise MalformedResponseError(f"{path}:{lineno}: rule needs match and response")
                rules.append(ScriptRule(match=obj["match"], response=obj["response"],
                                        finish=obj.get("finish", "stop"),
                                        regex=bool(obj.get("regex", False)),
                                        times=obj.get("times")))
        return cls(rules, **kwargs)

    def _pick_rule(self, prompt: str) -> ScriptRule:
        with self._lock:
            self.calls += 1
            for i, rule in enumerate(self.rules):
                if rule.times is not None and self._fired.get(i, 0) >= rule.times:
                    continue
                if rule.matches(prompt):
                    self._fired[i] = self._fired.get(i, 0) + 1
                    return rule
        head = prompt[:200].replace("\n", "\\n")
        raise MalformedResponseError(f"no scripted rule matched prompt starting {head!r}")

    def generate(self, request: GenerationRequest) -> GenerationStream:
        prompt_tokens = self.check_context(request)
        rule = self._pick_rule(request.rendered_prompt())
        text, matched = _apply_stops(rule.response, request.stop_sequences)
        if matched is not None:
            finish = FinishReason.stop(matched)
        elif rule.finish == "length":
            finish = FinishReason.length()
        else:
            finish = FinishReason.stop()
        usage = UsageReport(prompt_tokens, count_tokens(text), BACKEND_REPORTED)

        def chunks() -> Iterator[GenerationChunk]:
            if not text:
                yield GenerationChunk("", finish)
                return
            step = max(1, self.chunk_size)
            for i in range(0, len(text), step):
                piece = text[i:i + step]
                last = i + step >= len(text)
                yield GenerationChunk(piece, finish if last else None)

        stream = GenerationStream(chunks())
        stream.usage = usage
        return stream


class HttpChatBackend(Backend):
    """Client for a chat-completions-compatible HTTP endpoint.

    Sends model, messages, temperature, top_p, max_tokens, stop and stream;
    top_k is passed through only when the endpoint supports it, otherwise
    dropped with a one-time warning.  Credentials come from the environment
    variable named in the config, never from config values directly.
    """

    def __init__(self, url: str, model: str, *, api_key_env: str | None = None,
                 supports_top_k: bool = False, context_budget: int = DEFAULT_CONTEXT_BUDGET,
                 max_retries: int = DEFAULT_MAX_RETRIES, backoff_s: float = DEFAULT_BACKOFF_S,
                 timeout_s: float = 120.0, name: str = "http",
                 client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 abort_event: threading.Event | None = None,
                 warn: Callable[[str], None] | None = None):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.supports_top_k = supports_top_k
        self.context_budget = context_budget
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.name = name
        self._client = client or httpx.Client(timeout=timeout_s)
        self._sleep = sleep
        self.abort_event = abort_event
        self._warn = warn or (lambda msg: None)
        self._warned_top_k = False

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, request: GenerationRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "max_tokens": request.sampling.max_new_tokens,
        }
        if request.stop_sequences:
            body["stop"] = list(request.stop_sequences)
        if self.supports_top_k:
            body["top_k"] = request.sampling.top_k
        elif not self._warned_top_k:
            self._warned_top_k = True
            self._warn("endpoint does not support top_k; dropping it")
        if request.stream:
            body["stream"] = True
            body["stream_options"] = {"include_usage": True}
        return body

    def _post_with_retries(self, body: dict, stream: bool):
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if self.abort_event is not None and self.abort_event.is_set():
                raise AbortedError("request aborted")
            try:
                req = self._client.build_request("POST", self.url + "/chat/completions",
                                                 json=body, headers=self._headers())
                resp = self._client.send(req, stream=stream)
                if resp.status_code == 429:
                    retry_after = _parse_retry_after(resp)
                    resp.close()
                    last_exc = RateLimitedError(retry_after)
                elif resp.status_code >= 500:
                    resp.close()
                    last_exc = ConnectionFailedError(f"server error {resp.status_code}")
                elif resp.status_code >= 400:
                    detail = resp.read().decode("utf-8", "replace")[:500]
                    resp.close()
                    raise MalformedResponseError(f"HTTP {resp.status_code}: {detail}")
                else:
                    return resp
            except httpx.HTTPError as exc:
                last_exc = ConnectionFailedError(str(exc))
            if attempt < self.max_retries:
                delay = self.backoff_s * (2 ** attempt)
                if isinstance(last_exc, RateLimitedError) and last_exc.retry_after:
                    delay = max(delay, last_exc.retry_after)
                self._sleep(delay)
        raise last_exc  # retries exhausted

    def generate(self, request: GenerationRequest) -> GenerationStream:
        prompt_tokens = self.check_context(request)
        body = self._payload(request)
        if request.stream:
            return self._generate_streaming(request, body, prompt_tokens)
        return self._generate_single(request, body, prompt_tokens)

    def _generate_single(self, request: GenerationRequest, body: dict,
                         prompt_tokens: int) -> GenerationStream:
        resp = self._post_with_retries(body, stream=False)
        try:
            data = resp.json()
        except Exception as exc:
            raise MalformedResponseError(f"response is not JSON: {exc}") from exc
        finally:
            resp.close()
        try:
            choice = data["choices"][0]
            text = choice.get("message", {}).get("content") or ""
            reason = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected response shape: {exc}") from exc
        # Defensive client-side cut in case the endpoint ignored stop sequences.
        text, matched = _apply_stops(text, request.stop_sequences)
        finish = _map_finish(reason, matched)
        usage = _extract_usage(data.get("usage"), request, text, prompt_tokens)

        def chunks() -> Iterator[GenerationChunk]:
            yield GenerationChunk(text, finish)

        stream = GenerationStream(chunks())
        stream.usage = usage
        return stream

    def _generate_streaming(self, request: GenerationRequest, body: dict,
                            prompt_tokens: int) -> GenerationStream:
        resp = self._post_with_retries(body, stream=True)
        stream_box: dict = {"stream": None}

        def chunks() -> Iterator[GenerationChunk]:
            reason = None
            usage_obj = None
            parts: list[str] = []
            try:
                for line in resp.iter_lines():
                    if self.abort_event is not None and self.abort_event.is_set():
                        raise AbortedError("request aborted")
                    if not line or not line.startswith("data:"):
                        continue
                    data = line[len("data:"):].strip()
                    if data == "[DONE]":
                        break
                    try:
                        obj = json.loads(data)
                    except json.JSONDecodeError:
                        continue
                    if obj.get("usage"):
                        usage_obj = obj["usage"]
                    choices = obj.get("choices") or []
                    if not choices:
                        continue
                    delta = choices[0].get("delta") or {}
                    piece = delta.get("content") or ""
                    if choices[0].get("finish_reason"):
                        reason = choices[0]["finish_reason"]
                    if piece:
                        parts.append(piece)
                        yield GenerationChunk(piece)
            except httpx.HTTPError as exc:
                raise ConnectionFailedError(str(exc)) from exc
            finally:
                resp.close()
            text = "".join(parts)
            cut, matched = _apply_stops(text, request.stop_sequences)
            finish = _map_finish(reason, matched)
            tail_drop = len(text) - len(cut)
            # If a stop slipped through server-side, retract nothing already
            # yielded; emit the finish on an empty terminal chunk instead.
            usage = _extract_usage(usage_obj, request, text, prompt_tokens)
            if stream_box["stream"] is not None:
                stream_box["stream"].usage = usage
            yield GenerationChunk("", finish if tail_drop == 0 else FinishReason.stop(matched))

        stream = GenerationStream(chunks())
        stream_box["stream"] = stream
        return stream


def _parse_retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("Retry-After")
    if value is None:
        return None
    try:
        return float(value)
    except ValueError:
        return None


def _map_finish(reason: str | None, matched: str | None) -> FinishReason:
    if matched is not None:
        return FinishReason.stop(matched)
    if reason == "length":
        return FinishReason.length()
    if reason in (None, "stop"):
        return FinishReason.stop()
    return FinishReason.error(reason)


def _extract_usage(usage_obj: dict | None, request: GenerationRequest,
                   text: str, prompt_tokens: int) -> UsageReport:
    if usage_obj and "prompt_tokens" in usage_obj and "completion_tokens" in usage_obj:
        return UsageReport(int(usage_obj["prompt_tokens"]),
                           int(usage_obj["completion_tokens"]), BACKEND_REPORTED)
    return UsageReport(prompt_tokens, count_tokens(text), APPROXIMATED)
