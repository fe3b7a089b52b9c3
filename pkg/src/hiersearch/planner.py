"""Top-level session loop: a planner model delegates subtasks, the
coordinator routes them to experts and distills the results back into
the planner's context.

The transcript is append-only; context pressure is handled at prompt
render time by swapping old subtask results for conclusion-only stubs,
never by rewriting stored segments.
"""

from __future__ import annotations

import enum
import uuid
from dataclasses import dataclass, field

from .backend import (Backend, BackendError, Completion, SamplingParams, count_tokens,
                      make_request)
from .coordinator import Coordinator, DistillationReport, SelectionDecision, render_agent_info
from .executors import ExpertRegistry, ExpertTranscript
from .memory import MemoryStore, merge_facts, render_memory, upsert_resources
from .prompts import render_template
from .protocol import MarkerKind, MarkerTable, default_markers, sanitize_payload, wrap_result
from .textutils import last_boxed, last_paragraph
from .tools import ToolInvoker
from .trace import Tracer

DEFAULT_MAX_SUBTASKS = 10
RUNAWAY_LENGTH_LIMIT = 3  # consecutive length-truncated planner turns

BUDGET_EXHAUSTED_NOTICE = ("Subtask budget exhausted; no further subtasks will be "
                           "dispatched. Provide your final answer now, in the format "
                           "\\boxed{YOUR_ANSWER}.")


class SessionStatus(enum.Enum):
    RUNNING = "running"
    ANSWERED = "answered"
    BUDGET_EXHAUSTED = "budget_exhausted"
    FAILED = "failed"


@dataclass(frozen=True)
class Subtask:
    index: int  # 1-based
    description: str


@dataclass
class TranscriptSegment:
    kind: str  # "planner_text" | "subtask_call" | "subtask_result"
    content: str
    subtask_index: int | None = None


@dataclass
class SubtaskOutcome:
    subtask: Subtask
    expert_name: str
    display_name: str
    selection: SelectionDecision
    report: DistillationReport
    transcript: ExpertTranscript
    injected_content: str


@dataclass
class Session:
    id: str
    question: str
    segments: list[TranscriptSegment] = field(default_factory=list)
    outcomes: list[SubtaskOutcome] = field(default_factory=list)
    memory: MemoryStore = field(default_factory=MemoryStore)
    status: SessionStatus = SessionStatus.RUNNING
    final_answer: str | None = None
    answer_unboxed: bool = False
    failure_reason: str | None = None
    elided: set = field(default_factory=set)  # subtask indices, prompt view only
    planner_output_tokens: int = 0
    total_output_tokens: int = 0

    @property
    def subtasks_used(self) -> int:
        return len(self.outcomes)

    def transcript_text(self) -> str:
        """The pristine transcript, ignoring elision."""
        return "".join(seg.content for seg in self.segments)


def extract_final_answer(text: str) -> tuple[str, bool] | None:
    """(answer, unboxed). Prefers the last balanced \\boxed{...}; falls back
    to the last non-empty paragraph. None only for effectively empty text."""
    boxed = last_boxed(text)
    if boxed is not None and boxed.strip():
        return boxed.strip(), False
    paragraph = last_paragraph(text)
    if paragraph:
        return paragraph, True
    return None


class SessionRunner:
    """Drives one question end to end.

    Token totals are aggregated from the shared tracer's generation
    events, so coordinator and registry must be built with the same
    tracer for total_output_tokens to cover them (build_runtime wires
    this up).
    """

    def __init__(self, planner: Backend, coordinator: Coordinator,
                 registry: ExpertRegistry, invoker: ToolInvoker, *,
                 markers: MarkerTable | None = None,
                 sampling: SamplingParams | None = None,
                 max_subtasks: int = DEFAULT_MAX_SUBTASKS,
                 include_expert_descriptions: bool = True,
                 tracer: Tracer | None = None):
        if max_subtasks < 1:
            raise ValueError("max_subtasks must be >= 1")
        self.planner = planner
        self.coordinator = coordinator
        self.registry = registry
        self.invoker = invoker
        self.markers = markers or default_markers()
        self.sampling = sampling or SamplingParams()
        self.max_subtasks = max_subtasks
        self.include_expert_descriptions = include_expert_descriptions
        self.tracer = tracer

    # -- prompt assembly -----------------------------------------------------

    def _system_message(self, used: int) -> str:
        profiles = self.registry.profiles()
        if self.include_expert_descriptions:
            section = render_agent_info(profiles)
        else:
            section = "\n".join(f"- {p.name}" for p in profiles)
        begin_call, end_call = self.markers.pair(MarkerKind.SUBTASK_CALL)
        begin_result, end_result = self.markers.pair(MarkerKind.SUBTASK_RESULT)
        return render_template("planner", begin_subtask=begin_call,
                               end_subtask=end_call, begin_result=begin_result,
                               end_result=end_result,
                               max_subtasks=str(self.max_subtasks),
                               used_subtasks=str(used), expert_section=section)

    def _elided_content(self, session: Session, index: int) -> str:
        outcome = session.outcomes[index - 1]
        body = (f"Result from {outcome.display_name}: "
                f"[earlier reasoning elided to fit the context budget]\n"
                f"Final Conclusion: {outcome.report.final_conclusion}")
        wrapped = wrap_result(MarkerKind.SUBTASK_RESULT,
                              sanitize_payload(body, self.markers), self.markers)
        return f"\n{wrapped}\n\n"

    def _render_transcript(self, session: Session) -> str:
        parts = []
        for seg in session.segments:
            if seg.kind == "subtask_result" and seg.subtask_index in session.elided:
                parts.append(self._elided_content(session, seg.subtask_index))
            else:
                parts.append(seg.content)
        return "".join(parts)

    def _build_messages(self, session: Session, forced: bool):
        messages = [("system", self._system_message(session.subtasks_used)),
                    ("user", session.question)]
        transcript = self._render_transcript(session)
        if transcript:
            messages.append(("assistant", transcript))
        if forced:
            messages.append(("user", BUDGET_EXHAUSTED_NOTICE))
        return messages

    def _fit_context(self, session: Session, forced: bool, tracer: Tracer):
        """Build the planner request, eliding oldest subtask results until
        prompt + generation headroom fits the backend's context budget."""
        _, end_call = self.markers.pair(MarkerKind.SUBTASK_CALL)
        reserve = self.sampling.max_new_tokens
        while True:
            request = make_request(self._build_messages(session, forced),
                                   sampling=self.sampling, stop_sequences=[end_call])
            prompt_tokens = count_tokens(request.rendered_prompt())
            if prompt_tokens + reserve <= self.planner.context_budget:
                return request
            candidates = [seg.subtask_index for seg in session.segments
                          if seg.kind == "subtask_result"
                          and seg.subtask_index not in session.elided]
            if not candidates:
                return request  # nothing left to shed; the backend will refuse
            victim = candidates[0]
            session.elided.add(victim)
            tracer.emit("elide", channel="transcript", subtask_index=victim,
                        prompt_tokens_before=prompt_tokens)

    # -- the loop ------------------------------------------------------------

    def run(self, question: str, session_id: str | None = None) -> Session:
        session = Session(id=session_id or uuid.uuid4().hex[:12],
                          question=question.strip())
        tracer = self.tracer or Tracer(session.id)
        begin_call, end_call = self.markers.pair(MarkerKind.SUBTASK_CALL)
        consecutive_length = 0
        try:
            while session.status is SessionStatus.RUNNING:
                forced = session.subtasks_used >= self.max_subtasks
                request = self._fit_context(session, forced, tracer)
                completion = self.planner.complete(request)
                session.planner_output_tokens += completion.usage.output_tokens

                if completion.finish.kind == "error":
                    self._trace_turn(tracer, completion, appended="")
                    self._terminate(session, tracer, SessionStatus.FAILED,
                                    reason="backend_error_finish")
                    break

                text = completion.text
                if completion.finish.kind == "length":
                    consecutive_length += 1
                    appended = sanitize_payload(text, self.markers)
                    session.segments.append(TranscriptSegment("planner_text", appended))
                    self._trace_turn(tracer, completion, appended=appended)
                    if consecutive_length >= RUNAWAY_LENGTH_LIMIT:
                        self._terminate(session, tracer, SessionStatus.FAILED,
                                        reason="runaway_generation")
                        break
                    continue
                consecutive_length = 0

                pos = text.rfind(begin_call)
                description = text[pos + len(begin_call):].strip() if pos >= 0 else ""
                if forced or pos < 0 or not description:
                    self._finish_with_answer(session, tracer, completion, forced)
                    break

                pre = sanitize_payload(text[:pos], self.markers)
                self._trace_turn(tracer, completion, appended=pre)
                index = session.subtasks_used + 1
                subtask = Subtask(index, description)
                call_block = f"{begin_call}{description}{end_call}"
                session.segments.append(TranscriptSegment("planner_text", pre))
                session.segments.append(
                    TranscriptSegment("subtask_call", call_block, index))
                tracer.emit("subtask_call", index=index, description=description,
                            planner_text=pre, call_block=call_block)
                self._run_subtask(session, subtask, tracer)
        except BackendError as exc:
            self._terminate(session, tracer, SessionStatus.FAILED,
                            reason=f"backend_error: {exc}")
        self._finalize_usage(session, tracer)
        return session

    def _trace_turn(self, tracer: Tracer, completion: Completion, appended: str):
        tracer.emit("gen_turn", agent="planner", purpose="planner_turn",
                    prompt_tokens=completion.usage.prompt_tokens,
                    output_tokens=completion.usage.output_tokens,
                    finish=completion.finish.kind, appended_planner_text=appended)

    def _finish_with_answer(self, session: Session, tracer: Tracer,
                            completion: Completion, forced: bool):
        safe = sanitize_payload(completion.text, self.markers)
        session.segments.append(TranscriptSegment("planner_text", safe))
        self._trace_turn(tracer, completion, appended=safe)
        extracted = extract_final_answer(safe)
        if extracted is None:
            if forced:
                self._terminate(session, tracer, SessionStatus.BUDGET_EXHAUSTED,
                                reason="budget_exhausted_no_answer")
            else:
                self._terminate(session, tracer, SessionStatus.FAILED,
                                reason="empty_terminal_output")
            return
        answer, unboxed = extracted
        session.final_answer = answer
        session.answer_unboxed = unboxed
        if forced and unboxed:
            status, reason = SessionStatus.BUDGET_EXHAUSTED, "budget_exhausted_unboxed"
        elif forced:
            status, reason = SessionStatus.ANSWERED, "answered_after_budget_notice"
        else:
            status, reason = SessionStatus.ANSWERED, "answered"
        self._terminate(session, tracer, status, reason=reason)

    def _terminate(self, session: Session, tracer: Tracer, status: SessionStatus, *,
                   reason: str):
        session.status = status
        if status is SessionStatus.FAILED:
            session.failure_reason = reason
        tracer.emit("terminate", status=status.value, reason=reason,
                    final_answer=session.final_answer,
                    subtasks_used=session.subtasks_used)

    def _run_subtask(self, session: Session, subtask: Subtask, tracer: Tracer):
        decision = self.coordinator.select_expert(subtask, self.registry.profiles())
        entries = self.coordinator.filter_memory(subtask, session.memory)
        memory_context = render_memory(entries)
        transcript = self.registry.run(decision.selected_name, subtask,
                                       memory_context, self.invoker)
        report = self.coordinator.distill(subtask, transcript)
        session.memory = merge_facts(session.memory, report.fact_entries, tracer)
        session.memory = upsert_resources(session.memory, report.resource_entries,
                                          tracer)
        display = self.registry.display_name(decision.selected_name)
        body = (f"Result from {display}: {report.reasoning_process.strip()}\n"
                f"Final Conclusion: {report.final_conclusion}")
        wrapped = wrap_result(MarkerKind.SUBTASK_RESULT,
                              sanitize_payload(body, self.markers), self.markers)
        content = f"\n{wrapped}\n\n"
        session.segments.append(
            TranscriptSegment("subtask_result", content, subtask.index))
        tracer.emit("inject", index=subtask.index, expert=decision.selected_name,
                    content=content)
        session.outcomes.append(SubtaskOutcome(subtask, decision.selected_name,
                                               display, decision, report,
                                               transcript, content))

    def _finalize_usage(self, session: Session, tracer: Tracer):
        total = 0
        for event in tracer.events:
            if event.kind == "gen_turn":
                total += int(event.payload.get("output_tokens", 0) or 0)
        # the tracer may be shared across sessions; only trust it when it
        # covers at least this session's own planner turns
        session.total_output_tokens = max(total, session.planner_output_tokens)
