"""Expert executors: tool-augmented reasoning loops.

All experts share one mechanic: generate until a tool-call block appears
(the end marker doubles as the stop sequence), invoke the adapter, inject
the wrapped result, repeat until the model answers or the per-expert call
budget runs out.  Experts are isolated by construction: they see only the
subtask text and the filtered memory context, never the planner session.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .backend import Backend, BackendError, SamplingParams, make_request
from .coordinator import ExpertProfile
from .prompts import render_template
from .protocol import MarkerKind, MarkerTable, default_markers, sanitize_payload
from .textutils import extract_json_object
from .tools import ToolCallResult, ToolInvoker, truncate_to_tokens
from .trace import Tracer

TOOL_LIMIT_NOTICE = ("Tool call limit reached; no further calls will be executed. "
                     "Provide your final answer now using the information above.")

DEFAULT_QUERY_PLAN_CAP = 6
DEFAULT_ANSWER_DOC_TOKEN_CAP = 4000

CODE_EXAMPLE = ("To check a sum, write <|begin_code_call|>python\n"
                "print(21 + 21)\n<|end_code_call|>, read the execution result, "
                "and finish with \\boxed{42}.")

MM_EXAMPLE = ("<|begin_multimodal_call|> data: [photos/receipt.jpg] "
              "question: [What is the total amount on this receipt?] "
              "<|end_multimodal_call|>")


@dataclass(frozen=True)
class ToolInteraction:
    kind: MarkerKind
    request_payload: str
    result_payload: str
    duration_ms: int
    ok: bool


@dataclass
class ExpertTranscript:
    expert_name: str
    full_reasoning: str
    tool_log: list[ToolInteraction]
    final_text: str


@dataclass(frozen=True)
class ExpertSpec:
    name: str
    template: str
    call_kind: MarkerKind
    result_kind: MarkerKind
    max_tool_calls: int


def run_tool_loop(spec: ExpertSpec, subtask, memory_context: str, backend: Backend,
                  tool, *, markers: MarkerTable | None = None,
                  sampling: SamplingParams | None = None,
                  tracer: Tracer | None = None,
                  template_fields: dict | None = None) -> ExpertTranscript:
    """Generic tool loop; `tool` maps a call payload to a ToolCallResult.

    Transcript coherence holds by construction: the i-th ToolInteraction's
    payloads appear verbatim inside the i-th call/result block pair of
    full_reasoning, and stray markers in terminal text are defused so the
    transcript always re-scans cleanly.
    """
    table = markers or default_markers()
    begin, end = table.pair(spec.call_kind)
    rbegin, rend = table.pair(spec.result_kind)
    instruction = render_template(spec.template, current_memory=memory_context or "Empty.",
                                  task_info=subtask.description,
                                  **(template_fields or {}))
    messages: list[tuple[str, str]] = [("user", instruction)]
    parts: list[str] = []
    tool_log: list[ToolInteraction] = []
    final_text = ""

    def gen():
        request = make_request(messages, sampling=sampling, stop_sequences=[end])
        completion = backend.complete(request)
        if tracer:
            tracer.emit("gen_turn", agent=spec.name, purpose="expert_turn",
                        prompt_tokens=completion.usage.prompt_tokens,
                        output_tokens=completion.usage.output_tokens,
                        finish=completion.finish.kind)
        return completion

    try:
        while True:
            completion = gen()
            text = completion.text
            dispatch = completion.finish.kind == "stop" and begin in text
            if dispatch:
                pos = text.rfind(begin)
                payload = text[pos + len(begin):].strip()
                dispatch = bool(payload)
            if not dispatch:
                final_text = sanitize_payload(text, table).strip()
                parts.append(final_text)
                break
            pre = sanitize_payload(text[:pos], table)
            payload = sanitize_payload(payload, table)
            if len(tool_log) >= spec.max_tool_calls:
                # budget exhausted: refuse the call, give the model one
                # last turn to answer
                blocked = sanitize_payload(text, table)
                parts.append(blocked + "\n\n" + TOOL_LIMIT_NOTICE + "\n")
                messages.append(("assistant", blocked))
                messages.append(("user", TOOL_LIMIT_NOTICE))
                completion = gen()
                final_text = sanitize_payload(completion.text, table).strip()
                parts.append(final_text)
                break
            result = tool(payload)
            tool_log.append(ToolInteraction(spec.call_kind, payload,
                                            sanitize_payload(result.text, table).strip(),
                                            result.duration_ms, result.ok))
            call_block = f"{pre}{begin}{payload}{end}"
            result_block = f"{rbegin}\n{tool_log[-1].result_payload}\n{rend}"
            parts.append(f"{call_block}\n{result_block}\n")
            messages.append(("assistant", call_block))
            messages.append(("user", result_block))
    except BackendError as exc:
        if tool_log:
            tool_log[-1] = replace(tool_log[-1], ok=False)
        note = f"[expert backend failure: {exc}]"
        parts.append(note)
        final_text = final_text or note
    return ExpertTranscript(spec.name, "".join(parts), tool_log, final_text)


# --- payload handling -------------------------------------------------------


_FENCE_OPEN = re.compile(r"^```[a-zA-Z0-9_-]*\n?")
_FENCE_CLOSE = re.compile(r"\n?```$")


def strip_code_payload(payload: str) -> str:
    """Code blocks arrive as '<|begin_code_call|>python <code>'; drop the
    language tag and any markdown fences before execution."""
    text = payload.strip()
    if text.startswith("```"):
        text = _FENCE_CLOSE.sub("", _FENCE_OPEN.sub("", text)).strip()
    if text == "python":
        return ""
    for prefix in ("python\n", "python "):
        if text.startswith(prefix):
            return text[len(prefix):].strip()
    return text


def parse_multimodal_payload(payload: str) -> tuple[str, str] | None:
    """Payloads use labeled 'data:' and 'question:' fields; None when the
    labels are missing, empty, or out of order."""
    m_data = re.search(r"data\s*:", payload)
    m_question = re.search(r"question\s*:", payload)
    if not m_data or not m_question or m_data.start() >= m_question.start():
        return None
    path = payload[m_data.end():m_question.start()].strip().strip("[]").strip()
    question = payload[m_question.end():].strip().strip("[]").strip()
    if not path or not question:
        return None
    return path, question


_VISIT = re.compile(r"^\s*visit\s*:", re.IGNORECASE)


# --- the four experts -------------------------------------------------------


def code_execute(subtask, memory_context: str, backend: Backend, invoker: ToolInvoker,
                 *, max_tool_calls: int = 10, markers: MarkerTable | None = None,
                 sampling: SamplingParams | None = None, tracer: Tracer | None = None,
                 name: str = "code-agent") -> ExpertTranscript:
    spec = ExpertSpec(name, "code_agent", MarkerKind.CODE_CALL,
                      MarkerKind.CODE_RESULT, max_tool_calls)

    def tool(payload: str) -> ToolCallResult:
        code = strip_code_payload(payload)
        if not code:
            return ToolCallResult("Tool call failed: empty code block", False, 0)
        return invoker.code(code)

    return run_tool_loop(spec, subtask, memory_context, backend, tool,
                         markers=markers, sampling=sampling, tracer=tracer,
                         template_fields={"MAX_CODE_CALL_NUM": max_tool_calls,
                                          "example": CODE_EXAMPLE})


def multimodal_execute(subtask, memory_context: str, backend: Backend,
                       invoker: ToolInvoker, *, max_tool_calls: int = 5,
                       markers: MarkerTable | None = None,
                       sampling: SamplingParams | None = None,
                       tracer: Tracer | None = None,
                       name: str = "multimodal-agent") -> ExpertTranscript:
    spec = ExpertSpec(name, "multimodal_agent", MarkerKind.MULTIMODAL_CALL,
                      MarkerKind.MULTIMODAL_RESULT, max_tool_calls)

    def tool(payload: str) -> ToolCallResult:
        parsed = parse_multimodal_payload(payload)
        if parsed is None:
            return ToolCallResult("Tool call failed: malformed multimodal request; "
                                  "expected 'data: <path> question: <question>'",
                                  False, 0)
        path, question = parsed
        return invoker.media(path, question)

    return run_tool_loop(spec, subtask, memory_context, backend, tool,
                         markers=markers, sampling=sampling, tracer=tracer,
                         template_fields={"MAX_MM_CALL_NUM": max_tool_calls,
                                          "example": MM_EXAMPLE})


def deep_search_execute(subtask, memory_context: str, backend: Backend,
                        invoker: ToolInvoker, *, max_tool_calls: int = 15,
                        markers: MarkerTable | None = None,
                        sampling: SamplingParams | None = None,
                        tracer: Tracer | None = None,
                        name: str = "deep-search-agent") -> ExpertTranscript:
    """Iterative searcher: the query payload either runs a web search or,
    with a 'visit: <url>' directive, fetches a result page."""
    spec = ExpertSpec(name, "deep_search_agent", MarkerKind.SEARCH_QUERY,
                      MarkerKind.SEARCH_RESULT, max_tool_calls)

    def tool(payload: str) -> ToolCallResult:
        text = payload.strip()
        if _VISIT.match(text):
            url = text.split(":", 1)[1].strip().strip("[]").strip()
            if not url:
                return ToolCallResult("Tool call failed: visit directive without a url",
                                      False, 0)
            return invoker.visit(url)
        return invoker.search(text)

    return run_tool_loop(spec, subtask, memory_context, backend, tool,
                         markers=markers, sampling=sampling, tracer=tracer,
                         template_fields={"MAX_SEARCH_CALL_NUM": max_tool_calls})


def parse_query_plan(text: str, fallback_query: str,
                     cap: int = DEFAULT_QUERY_PLAN_CAP) -> tuple[list[str], bool]:
    """Strict {"query_plan": [...]} parse with a single-query fallback on
    failure; returns (queries, used_fallback)."""
    obj = extract_json_object(text)
    if obj is not None and isinstance(obj.get("query_plan"), list):
        queries = [" ".join(str(q).split()) for q in obj["query_plan"]
                   if str(q).strip()]
        if queries:
            return queries[:cap], False
    return [" ".join(fallback_query.split())], True


def simple_search_execute(subtask, memory_context: str, backend: Backend,
                          invoker: ToolInvoker, *, markers: MarkerTable | None = None,
                          sampling: SamplingParams | None = None,
                          tracer: Tracer | None = None,
                          query_plan_cap: int = DEFAULT_QUERY_PLAN_CAP,
                          doc_token_cap: int = DEFAULT_ANSWER_DOC_TOKEN_CAP,
                          name: str = "search-agent") -> ExpertTranscript:
    """Two-phase searcher: one query-planning call, one search per
    sub-query, then one answer-generation call over the collected
    documents."""
    table = markers or default_markers()
    qbegin, qend = table.pair(MarkerKind.SEARCH_QUERY)
    rbegin, rend = table.pair(MarkerKind.SEARCH_RESULT)

    def complete(prompt: str, purpose: str, **extra):
        request = make_request([("user", prompt)], sampling=sampling)
        completion = backend.complete(request)
        if tracer:
            tracer.emit("gen_turn", agent=name, purpose=purpose,
                        prompt_tokens=completion.usage.prompt_tokens,
                        output_tokens=completion.usage.output_tokens,
                        finish=completion.finish.kind, **extra)
        return completion

    plan_prompt = render_template("query_plan", question=subtask.description)
    try:
        plan_completion = complete(plan_prompt, "query_plan")
    except BackendError as exc:
        note = f"[expert backend failure: {exc}]"
        return ExpertTranscript(name, note, [], note)
    queries, used_fallback = parse_query_plan(plan_completion.text,
                                              subtask.description, query_plan_cap)
    if used_fallback and tracer:
        tracer.emit("gen_turn", agent=name, purpose="query_plan",
                    warning="query plan parse failed; falling back to the subtask text")

    parts: list[str] = [sanitize_payload(plan_completion.text, table).strip() + "\n"]
    tool_log: list[ToolInteraction] = []
    doc_sections: list[str] = []
    for query in queries:
        query = sanitize_payload(query, table)
        result = invoker.search(query)
        payload = sanitize_payload(result.text, table).strip()
        tool_log.append(ToolInteraction(MarkerKind.SEARCH_QUERY, query, payload,
                                        result.duration_ms, result.ok))
        parts.append(f"{qbegin}{query}{qend}\n{rbegin}\n{payload}\n{rend}\n")
        section, _ = truncate_to_tokens(payload, doc_token_cap)
        doc_sections.append(section)

    documents = "\n\n".join(s for s in doc_sections if s) or "No documents were retrieved."
    if memory_context:
        documents = f"Previous exploration results:\n{memory_context}\n\n{documents}"
    answer_prompt = render_template("search_answer", question=subtask.description,
                                    documents=documents)
    try:
        answer_completion = complete(answer_prompt, "search_answer")
    except BackendError as exc:
        if tool_log:
            tool_log[-1] = replace(tool_log[-1], ok=False)
        note = f"[expert backend failure: {exc}]"
        parts.append(note)
        return ExpertTranscript(name, "".join(parts), tool_log, note)
    final_text = sanitize_payload(answer_completion.text, table).strip()
    parts.append(final_text)
    return ExpertTranscript(name, "".join(parts), tool_log, final_text)


# --- registry ---------------------------------------------------------------


EXPERT_KINDS = ("simple-search", "deep-search", "code", "multimodal")


@dataclass(frozen=True)
class ExpertDefinition:
    profile: ExpertProfile
    kind: str  # one of EXPERT_KINDS
    max_tool_calls: int
    display_name: str

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {self.kind!r}")


def default_expert_definitions() -> list[ExpertDefinition]:
    return [
        ExpertDefinition(
            ExpertProfile("search-agent",
                          "Searches the web with a short query plan and synthesizes "
                          "an answer from the retrieved documents. Best for simple "
                          "fact lookup and verification.", cost_tier=1),
            "simple-search", max_tool_calls=DEFAULT_QUERY_PLAN_CAP,
            display_name="Search Agent"),
        ExpertDefinition(
            ExpertProfile("code-agent",
                          "Writes and executes Python code in a sandbox to compute, "
                          "process data, and fetch information programmatically. Best "
                          "for calculation and anything a script can verify.",
                          cost_tier=2),
            "code", max_tool_calls=10, display_name="Code-Agent"),
        ExpertDefinition(
            ExpertProfile("multimodal-agent",
                          "Inspects images, audio, and video files by querying a "
                          "multimodal model. Best when the answer depends on non-text "
                          "media.", cost_tier=2),
            "multimodal", max_tool_calls=5, display_name="Multimodal-Agent"),
        ExpertDefinition(
            ExpertProfile("deep-search-agent",
                          "Iteratively searches the web and opens result pages to dig "
                          "for hard-to-find information. Best for multi-hop web "
                          "research when one round of search is not enough.",
                          cost_tier=3),
            "deep-search", max_tool_calls=15, display_name="Deep Search Agent"),
    ]


class ExpertRegistry:
    """Closed world of experts: every routable name maps to exactly one
    definition, and execution only ever goes through run()."""

    def __init__(self, definitions: list[ExpertDefinition], backend: Backend, *,
                 markers: MarkerTable | None = None,
                 sampling: SamplingParams | None = None,
                 tracer: Tracer | None = None):
        if not definitions:
            raise ValueError("registry needs at least one expert")
        self.definitions = {d.profile.name: d for d in definitions}
        if len(self.definitions) != len(definitions):
            raise ValueError("duplicate expert names")
        self.backend = backend
        self.markers = markers or default_markers()
        self.sampling = sampling
        self.tracer = tracer

    def profiles(self) -> list[ExpertProfile]:
        return [d.profile for d in self.definitions.values()]

    def display_name(self, name: str) -> str:
        return self.definitions[name].display_name

    def run(self, name: str, subtask, memory_context: str,
            invoker: ToolInvoker) -> ExpertTranscript:
        definition = self.definitions[name]
        invoker.current_expert = name
        common = dict(markers=self.markers, sampling=self.sampling,
                      tracer=self.tracer, name=name)
        if definition.kind == "simple-search":
            return simple_search_execute(subtask, memory_context, self.backend,
                                         invoker,
                                         query_plan_cap=definition.max_tool_calls,
                                         **common)
        if definition.kind == "deep-search":
            return deep_search_execute(subtask, memory_context, self.backend, invoker,
                                       max_tool_calls=definition.max_tool_calls,
                                       **common)
        if definition.kind == "code":
            return code_execute(subtask, memory_context, self.backend, invoker,
                                max_tool_calls=definition.max_tool_calls, **common)
        return multimodal_execute(subtask, memory_context, self.backend, invoker,
                                  max_tool_calls=definition.max_tool_calls, **common)
