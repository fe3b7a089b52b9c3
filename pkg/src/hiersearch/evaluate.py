"""Benchmark harness: dataset loading, model-based judging, and run metrics.

Metrics are always derived from per-item rows through one code path
(metrics_from_rows) so a recompute from a saved results file is
bit-identical to the numbers reported at run time.
"""

from __future__ import annotations

import concurrent.futures
import json
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .backend import Backend, BackendError, count_tokens, make_request
from .planner import Session, SessionRunner
from .prompts import render_template
from .protocol import MarkerKind, MarkerTable, default_markers
from .trace import TraceEvent, Tracer

JUDGE_TEMPLATES = {"general": "judge_general", "webwalker": "judge_webwalker"}
DEFAULT_JUDGE_RETRIES = 2
DEFAULT_MAX_PARALLEL = 4


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    question: str
    answer: str
    category: str | None = None
    file: str | None = None


def load_dataset(path: str) -> list[BenchmarkItem]:
    items: list[BenchmarkItem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            for key in ("id", "question", "answer"):
                if not str(obj.get(key, "")).strip():
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            item_id = str(obj["id"])
            if item_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {item_id!r}")
            seen.add(item_id)
            items.append(BenchmarkItem(item_id, str(obj["question"]),
                                       str(obj["answer"]),
                                       obj.get("category"), obj.get("file")))
    if not items:
        raise ValueError(f"{path}: dataset is empty")
    return items


# -- judging -----------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    correct: bool
    parse_failed: bool
    raw: str


def judge(backend: Backend, question: str, labeled_answer: str, pred_answer: str, *,
          template: str = "general", retries: int = DEFAULT_JUDGE_RETRIES,
          tracer: Tracer | None = None, item_id: str | None = None) -> JudgeVerdict:
    """Strict two-way verdict: the judge must answer exactly 'Correct' or
    'Incorrect' (post-trim).  Anything else is retried; persistent garbage
    scores Incorrect with parse_failed set."""
    template_name = JUDGE_TEMPLATES.get(template)
    if template_name is None:
        raise ValueError(f"unknown judge template {template!r}; "
                         f"expected one of {sorted(JUDGE_TEMPLATES)}")
    prompt = render_template(template_name, question=question,
                             labeled_answer=labeled_answer, pred_answer=pred_answer)
    raw = ""
    for attempt in range(retries + 1):
        completion = backend.complete(make_request([("user", prompt)]))
        raw = completion.text
        if tracer:
            tracer.emit("gen_turn", agent="judge", purpose="judge", attempt=attempt,
                        item_id=item_id, output_tokens=completion.usage.output_tokens,
                        finish=completion.finish.kind)
        verdict = raw.strip()
        if verdict == "Correct":
            return JudgeVerdict(True, False, raw)
        if verdict == "Incorrect":
            return JudgeVerdict(False, False, raw)
    if tracer:
        tracer.emit("gen_turn", agent="judge", purpose="judge", item_id=item_id,
                    warning="judge_parse_failed", raw=raw[:200])
    return JudgeVerdict(False, True, raw)


# -- interaction accounting --------------------------------------------------


def count_interactions(events: Iterable[TraceEvent]) -> int:
    """Executed tool interactions: tool_call trace events minus cache hits."""
    return sum(1 for ev in events
               if ev.kind == "tool_call" and not ev.payload.get("cached"))


_RESULT_KIND = {MarkerKind.SEARCH_QUERY: MarkerKind.SEARCH_RESULT,
                MarkerKind.CODE_CALL: MarkerKind.CODE_RESULT,
                MarkerKind.MULTIMODAL_CALL: MarkerKind.MULTIMODAL_RESULT,
                MarkerKind.SUBTASK_CALL: MarkerKind.SUBTASK_RESULT}


def distilled_vs_raw_tokens(session: Session,
                            markers: MarkerTable | None = None) -> tuple[int, int]:
    """(tokens the planner context actually carries for subtask results,
    tokens it would carry if raw tool output blocks were injected instead)."""
    table = markers or default_markers()
    injected = sum(count_tokens(o.injected_content) for o in session.outcomes)
    raw = 0
    for outcome in session.outcomes:
        for interaction in outcome.transcript.tool_log:
            begin, end = table.pair(_RESULT_KIND[interaction.kind])
            raw += count_tokens(f"\n{begin}\n{interaction.result_payload}\n{end}\n\n")
    return injected, raw


# -- benchmark runs ----------------------------------------------------------


@dataclass
class ItemResult:
    item_id: str
    category: str | None
    status: str  # SessionStatus value, or "failed" on an unexpected error
    answer: str | None
    verdict: str | None  # "correct" | "incorrect" when judged, else None
    planner_tokens: int
    total_tokens: int
    interactions: int
    subtasks: int
    wall_time_s: float
    judge_parse_failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {"id": self.item_id, "category": self.category, "status": self.status,
                "answer": self.answer, "verdict": self.verdict,
                "planner_tokens": self.planner_tokens,
                "total_tokens": self.total_tokens,
                "interactions": self.interactions, "subtasks": self.subtasks,
                "wall_time_s": round(self.wall_time_s, 3),
                "judge_parse_failed": self.judge_parse_failed, "error": self.error}


def row_from_dict(obj: dict) -> ItemResult:
    """Tolerant of bare prediction files: anything with an id and an answer
    re-scores; missing session fields default to zero."""
    default_status = "answered" if obj.get("answer") is not None else "failed"
    return ItemResult(obj["id"], obj.get("category"), obj.get("status", default_status),
                      obj.get("answer"), obj.get("verdict"),
                      int(obj.get("planner_tokens", 0)),
                      int(obj.get("total_tokens", 0)),
                      int(obj.get("interactions", 0)), int(obj.get("subtasks", 0)),
                      float(obj.get("wall_time_s", 0.0)),
                      bool(obj.get("judge_parse_failed", False)), obj.get("error"))


@dataclass
class RunMetrics:
    n_total: int
    n_scored: int
    accuracy: float
    mean_output_tokens: float
    mean_interactions: float
    per_category: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n_total": self.n_total, "n_scored": self.n_scored,
                "accuracy": self.accuracy,
                "mean_output_tokens": self.mean_output_tokens,
                "mean_interactions": self.mean_interactions,
                "per_category": self.per_category}


def metrics_from_rows(rows: Sequence[ItemResult], strict: bool = True) -> RunMetrics:
    """Aggregate rows into run metrics.

    strict counts unjudged sessions (failures, budget exhaustion without an
    answer) as incorrect; non-strict drops them from every aggregate.
    """
    if strict:
        scored = list(rows)
    else:
        scored = [r for r in rows if r.verdict is not None]
    n = len(scored)
    correct = sum(1 for r in scored if r.verdict == "correct")
    accuracy = correct / n if n else 0.0
    mean_tokens = sum(r.total_tokens for r in scored) / n if n else 0.0
    mean_interactions = sum(r.interactions for r in scored) / n if n else 0.0
    per_category: dict = {}
    for row in scored:
        key = row.category or "uncategorized"
        bucket = per_category.setdefault(key, {"n": 0, "correct": 0})
        bucket["n"] += 1
        bucket["correct"] += 1 if row.verdict == "correct" else 0
    for bucket in per_category.values():
        bucket["accuracy"] = bucket["correct"] / bucket["n"]
    return RunMetrics(len(rows), n, accuracy, mean_tokens, mean_interactions,
                      per_category)


def _safe_filename(item_id: str) -> str:
    return re.sub(r"[^\w.-]", "_", item_id)


def run_item(item: BenchmarkItem,
             runner_factory: Callable[[str], tuple[SessionRunner, Tracer]],
             judge_backend: Backend, *, judge_template: str = "general",
             trace_dir: str | None = None) -> ItemResult:
    question = item.question
    if item.file:
        question = f"{question}\n[Attached file: {item.file}]"
    runner, tracer = runner_factory(item.id)
    started = time.perf_counter()
    error = None
    try:
        session = runner.run(question, session_id=item.id)
    except (BackendError, ValueError, KeyError, OSError) as exc:
        session = None
        error = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - started

    if session is None:
        result = ItemResult(item.id, item.category, "failed", None, None, 0, 0,
                            count_interactions(tracer.events), 0, wall, error=error)
    else:
        verdict_str = None
        parse_failed = False
        if session.final_answer is not None:
            verdict = judge(judge_backend, item.question, item.answer,
                            session.final_answer, template=judge_template,
                            tracer=tracer, item_id=item.id)
            verdict_str = "correct" if verdict.correct else "incorrect"
            parse_failed = verdict.parse_failed
        result = ItemResult(item.id, item.category, session.status.value,
                            session.final_answer, verdict_str,
                            session.planner_output_tokens,
                            session.total_output_tokens,
                            count_interactions(tracer.events),
                            session.subtasks_used, wall,
                            judge_parse_failed=parse_failed)
    if trace_dir:
        tracer.write_jsonl(f"{trace_dir.rstrip('/')}/{_safe_filename(item.id)}.trace.jsonl")
    return result


def run_benchmark(items: Sequence[BenchmarkItem],
                  runner_factory: Callable[[str], tuple[SessionRunner, Tracer]],
                  judge_backend: Backend, *, judge_template: str = "general",
                  strict: bool = True, max_parallel: int = DEFAULT_MAX_PARALLEL,
                  trace_dir: str | None = None,
                  progress: Callable[[ItemResult], None] | None = None
                  ) -> tuple[list[ItemResult], RunMetrics]:
    """Run every item (up to max_parallel concurrently), judge the answers,
    and aggregate.  Rows come back in dataset order regardless of
    completion order."""
    max_parallel = max(1, max_parallel)
    rows: list[ItemResult | None] = [None] * len(items)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_parallel) as pool:
        futures = {pool.submit(run_item, item, runner_factory, judge_backend,
                               judge_template=judge_template, trace_dir=trace_dir): i
                   for i, item in enumerate(items)}
        for future in concurrent.futures.as_completed(futures):
            index = futures[future]
            rows[index] = future.result()
            if progress:
                progress(rows[index])
    done = [r for r in rows if r is not None]
    return done, metrics_from_rows(done, strict=strict)


def write_results(path: str, rows: Sequence[ItemResult], metrics: RunMetrics,
                  strict: bool) -> None:
    """results file: one row per line, then a final metrics line."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({"kind": "item", **row.to_dict()},
                                ensure_ascii=False) + "\n")
        fh.write(json.dumps({"kind": "metrics", "strict": strict,
                             **metrics.to_dict()}, ensure_ascii=False) + "\n")


def load_results(path: str) -> tuple[list[ItemResult], dict | None]:
    rows: list[ItemResult] = []
    metrics_obj = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("kind") == "metrics":
                metrics_obj = obj
            else:
                rows.append(row_from_dict(obj))
    return rows, metrics_obj
