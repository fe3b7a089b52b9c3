"""Special-token marker protocol shared by every agent in the system.

Agents communicate through paired begin/end marker strings embedded in
generated text: the planner emits subtask calls, experts emit tool calls,
and the orchestrator injects wrapped results back into the stream.  This
module owns the marker table, an incremental scanner that is robust to
markers split across chunk boundaries, block extraction, and result
wrapping with payload sanitization.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Union


class MarkerKind(Enum):
    SUBTASK_CALL = "subtask_call"
    SUBTASK_RESULT = "subtask_result"
    CODE_CALL = "code_call"
    CODE_RESULT = "code_result"
    SEARCH_QUERY = "search_query"
    SEARCH_RESULT = "search_result"
    MULTIMODAL_CALL = "multimodal_call"
    MULTIMODAL_RESULT = "multimodal_result"


_DEFAULT_PAIRS = {
    MarkerKind.SUBTASK_CALL: ("<|begin_call_subtask|>", "<|end_call_subtask|>"),
    MarkerKind.SUBTASK_RESULT: ("<|begin_subtask_result|>", "<|end_subtask_result|>"),
    MarkerKind.CODE_CALL: ("<|begin_code_call|>", "<|end_code_call|>"),
    MarkerKind.CODE_RESULT: ("<|begin_code_call_result|>", "<|end_code_call_result|>"),
    MarkerKind.SEARCH_QUERY: ("<|begin_search_query|>", "<|end_search_query|>"),
    MarkerKind.SEARCH_RESULT: ("<|begin_search_result|>", "<|end_search_result|>"),
    MarkerKind.MULTIMODAL_CALL: ("<|begin_multimodal_call|>", "<|end_multimodal_call|>"),
    MarkerKind.MULTIMODAL_RESULT: ("<|begin_multimodal_result|>", "<|end_multimodal_result|>"),
}

# Zero-width space; inserted inside marker strings found in payloads so the
# scanner no longer recognizes them while the visible text stays readable.
DEFAULT_BREAK_TOKEN = "​"


class ProtocolError(Exception):
    pass


class UnbalancedMarkerError(ProtocolError):
    """An end marker without an open block, a nested begin, a mismatched
    close, or a stream that ends inside an open block."""

    def __init__(self, kind: MarkerKind, offset: int, detail: str = ""):
        self.kind = kind
        self.offset = offset
        msg = f"unbalanced {kind.value} marker at offset {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class PayloadContainsMarkerError(ProtocolError):
    def __init__(self, token: str):
        self.token = token
        super().__init__(f"payload contains marker string {token!r}; sanitize it first")


class MarkerTable:
    """Injectable mapping from MarkerKind to (begin, end) marker strings.

    All marker strings must be globally distinct, at least two characters
    long, and must not contain the configured break token.
    """

    def __init__(self, pairs: dict[MarkerKind, tuple[str, str]] | None = None,
                 break_token: str = DEFAULT_BREAK_TOKEN):
        self.pairs = dict(pairs if pairs is not None else _DEFAULT_PAIRS)
        self.break_token = break_token
        if not self.pairs:
            raise ValueError("marker table must not be empty")
        if not break_token:
            raise ValueError("break token must be non-empty")
        seen: set[str] = set()
        for kind, (begin, end) in self.pairs.items():
            for token in (begin, end):
                if len(token) < 2:
                    raise ValueError(f"marker {token!r} for {kind.value} is too short")
                if break_token in token:
                    raise ValueError(f"marker {token!r} contains the break token")
                if token in seen:
                    raise ValueError(f"duplicate marker string {token!r}")
                seen.add(token)
        # token -> (kind, is_begin), used by the scanner
        self._lookup: dict[str, tuple[MarkerKind, bool]] = {}
        for kind, (begin, end) in self.pairs.items():
            self._lookup[begin] = (kind, True)
            self._lookup[end] = (kind, False)
        self._max_len = max(len(t) for t in self._lookup)

    def begin(self, kind: MarkerKind) -> str:
        return self.pairs[kind][0]

    def end(self, kind: MarkerKind) -> str:
        return self.pairs[kind][1]

    def pair(self, kind: MarkerKind) -> tuple[str, str]:
        return self.pairs[kind]

    def tokens(self) -> Sequence[str]:
        return tuple(self._lookup)

    def classify(self, token: str) -> tuple[MarkerKind, bool]:
        return self._lookup[token]

    @property
    def max_token_len(self) -> int:
        return self._max_len


_DEFAULT_TABLE: MarkerTable | None = None


def default_markers() -> MarkerTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = MarkerTable()
    return _DEFAULT_TABLE


@dataclass(frozen=True)
class Text:
    span: str


@dataclass(frozen=True)
class BlockOpen:
    kind: MarkerKind


@dataclass(frozen=True)
class BlockClose:
    kind: MarkerKind


StreamEvent = Union[Text, BlockOpen, BlockClose]


@dataclass(frozen=True)
class Block:
    kind: MarkerKind
    payload: str  # surrounding whitespace trimmed


class StreamScanner:
    """Incremental scanner over streamed text chunks.

    feed() returns the events that became unambiguous with the new chunk;
    text that is a strict prefix of some marker string is buffered until
    the next chunk disambiguates it.  finish() flushes any buffered text
    (a dangling partial prefix is plain text once the stream ends) and
    raises if the stream ends inside an open block.
    """

    def __init__(self, markers: MarkerTable | None = None):
        self.markers = markers or default_markers()
        self._buf = ""
        self._pos = 0  # absolute offset of the start of the buffer
        self._open: MarkerKind | None = None
        self._open_offset = 0
        self._finished = False

    def feed(self, chunk: str) -> list[StreamEvent]:
        if self._finished:
            raise RuntimeError("scanner already finished")
        self._buf += chunk
        events: list[StreamEvent] = []
        while True:
            hit = self._find_marker(self._buf)
            if hit is None:
                keep = self._prefix_holdback(self._buf)
                emit_len = len(self._buf) - keep
                if emit_len > 0:
                    events.append(Text(self._buf[:emit_len]))
                    self._buf = self._buf[emit_len:]
                    self._pos += emit_len
                break
            start, token = hit
            if start > 0:
                events.append(Text(self._buf[:start]))
            kind, is_begin = self.markers.classify(token)
            offset = self._pos + start
            if is_begin:
                if self._open is not None:
                    raise UnbalancedMarkerError(kind, offset, "nested block")
                self._open = kind
                self._open_offset = offset
                events.append(BlockOpen(kind))
            else:
                if self._open is None:
                    raise UnbalancedMarkerError(kind, offset, "end marker without open block")
                if self._open is not kind:
                    raise UnbalancedMarkerError(kind, offset,
                                                f"closes {kind.value} inside open {self._open.value}")
                self._open = None
                events.append(BlockClose(kind))
            consumed = start + len(token)
            self._buf = self._buf[consumed:]
            self._pos += consumed
        return events

    def finish(self) -> list[StreamEvent]:
        if self._finished:
            return []
        self._finished = True
        events: list[StreamEvent] = []
        if self._buf:
            events.append(Text(self._buf))
            self._pos += len(self._buf)
            self._buf = ""
        if self._open is not None:
            raise UnbalancedMarkerError(self._open, self._open_offset,
                                        "stream ended inside open block")
        return events

    def _find_marker(self, buf: str) -> tuple[int, str] | None:
        best: tuple[int, str] | None = None
        for token in self.markers.tokens():
            idx = buf.find(token)
            if idx == -1:
                continue
            if best is None or idx < best[0] or (idx == best[0] and len(token) > len(best[1])):
                best = (idx, token)
        return best

    def _prefix_holdback(self, buf: str) -> int:
        # longest suffix of buf that is a strict prefix of some marker string
        limit = min(len(buf), self.markers.max_token_len - 1)
        for k in range(limit, 0, -1):
            tail = buf[-k:]
            for token in self.markers.tokens():
                if len(token) > k and token.startswith(tail):
                    return k
        return 0


def _coalesce(events: Iterable[StreamEvent]) -> list[StreamEvent]:
    out: list[StreamEvent] = []
    for ev in events:
        if isinstance(ev, Text):
            if not ev.span:
                continue
            if out and isinstance(out[-1], Text):
                out[-1] = Text(out[-1].span + ev.span)
                continue
        out.append(ev)
    return out


def scan_stream(chunks: Iterable[str], markers: MarkerTable | None = None) -> list[StreamEvent]:
    """Scan a chunked text stream into a flat event list.

    Chunking-invariant: any partition of the same string yields the same
    events as scanning the whole string at once.  Adjacent text spans are
    coalesced and empty spans dropped so the invariance is exact.
    """
    scanner = StreamScanner(markers)
    events: list[StreamEvent] = []
    for chunk in chunks:
        events.extend(scanner.feed(chunk))
    events.extend(scanner.finish())
    return _coalesce(events)


def scan_text(text: str, markers: MarkerTable | None = None) -> list[StreamEvent]:
    return scan_stream([text], markers)


def serialize_events(events: Iterable[StreamEvent], markers: MarkerTable | None = None) -> str:
    """Inverse of scan_stream: re-serializing the events reconstructs the
    input byte-exactly."""
    table = markers or default_markers()
    parts: list[str] = []
    for ev in events:
        if isinstance(ev, Text):
            parts.append(ev.span)
        elif isinstance(ev, BlockOpen):
            parts.append(table.begin(ev.kind))
        elif isinstance(ev, BlockClose):
            parts.append(table.end(ev.kind))
        else:
            raise TypeError(f"not a stream event: {ev!r}")
    return "".join(parts)


def extract_blocks(text: str, kind: MarkerKind, markers: MarkerTable | None = None) -> list[Block]:
    """All non-overlapping blocks of the given kind, left to right.

    The whole text is scanned, so unbalanced markers of any kind raise
    UnbalancedMarkerError.
    """
    blocks: list[Block] = []
    collecting = False
    parts: list[str] = []
    for ev in scan_text(text, markers):
        if isinstance(ev, BlockOpen) and ev.kind is kind:
            collecting = True
            parts = []
        elif isinstance(ev, BlockClose) and ev.kind is kind:
            blocks.append(Block(kind, "".join(parts).strip()))
            collecting = False
        elif isinstance(ev, Text) and collecting:
            parts.append(ev.span)
    return blocks


def wrap_result(kind: MarkerKind, payload: str, markers: MarkerTable | None = None) -> str:
    """begin + payload + end.  The payload must already be marker-free;
    callers sanitize with sanitize_payload() first."""
    table = markers or default_markers()
    for token in table.tokens():
        if token in payload:
            raise PayloadContainsMarkerError(token)
    begin, end = table.pair(kind)
    return f"{begin}{payload}{end}"


def sanitize_payload(payload: str, markers: MarkerTable | None = None) -> str:
    """Defuse marker strings inside a payload by inserting the break token
    mid-marker.  Idempotent on clean payloads; always returns text that
    wrap_result accepts."""
    table = markers or default_markers()
    for _ in range(10):
        dirty = False
        for token in table.tokens():
            if token in payload:
                dirty = True
                mid = len(token) // 2
                payload = payload.replace(token, token[:mid] + table.break_token + token[mid:])
        if not dirty:
            return payload
    raise ProtocolError("payload sanitization did not converge")
