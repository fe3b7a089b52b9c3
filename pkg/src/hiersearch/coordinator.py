"""Coordinator between the meta planner and the expert agents.

Three responsibilities, each one instruction template away from a backend:
routing a subtask to the cheapest capable expert, distilling an expert's
raw reasoning into a compact report plus memory entries, and filtering the
session memory down to at most five task-relevant facts for the expert.
The coordinator never mutates the memory store; it only returns entries
for the session runner to merge.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .backend import Backend, SamplingParams, make_request
from .memory import (FactEntry, MemoryStore, NOT_SPECIFIED, ResourceEntry,
                     render_fact_line, render_memory)
from .prompts import render_template
from .textutils import extract_json_object
from .trace import Tracer

DEFAULT_SELECTION_RETRIES = 2
MEMORY_FILTER_CAP = 5

SELECT_EXAMPLE = ('{"reason": "The task is a single factual lookup that one '
                  'round of web search can settle, which the search agent '
                  'covers at the lowest cost.", '
                  '"selected_agent_name": "search-agent"}')

DISTILL_EXAMPLE = (
    '{"reasoning_process": "Searched for the tower\'s official height, opened the '
    'architect\'s page, and cross-checked the figure against the encyclopedia entry.", '
    '"final_conclusion": "The tower is 330 meters tall.", '
    '"fact_memory": ["The Eiffel Tower is 330 meters tall [Source: '
    'https://en.wikipedia.org/wiki/Eiffel_Tower]"], '
    '"resource_memory": {"Official Eiffel Tower site": "https://www.toureiffel.paris"}}')


@dataclass(frozen=True)
class ExpertProfile:
    name: str
    capability_description: str
    cost_tier: int = 1  # lower is cheaper; used for fallback routing


@dataclass(frozen=True)
class SelectionDecision:
    reason: str
    selected_name: str
    retries_used: int = 0


@dataclass
class DistillationReport:
    reasoning_process: str
    final_conclusion: str
    fact_entries: list[FactEntry] = field(default_factory=list)
    resource_entries: list[ResourceEntry] = field(default_factory=list)
    degraded: bool = False


def render_agent_info(profiles: list[ExpertProfile]) -> str:
    lines = []
    for p in profiles:
        lines.append(f"- Name: {p.name}\n  Cost tier: {p.cost_tier}\n"
                     f"  Description: {p.capability_description}")
    return "\n".join(lines)


_SOURCE_SUFFIX = re.compile(r"\[Source:\s*(.*?)\]\s*$")
_MEMORY_LINE = re.compile(r"Memory Fact\s*\d+\s*:\s*(.+)")


def parse_fact_string(raw: str, subtask_index: int) -> FactEntry | None:
    """Parse the canonical 'content [Source: x]' fact string; a missing
    source degrades to Not Specified rather than dropping the fact."""
    text = " ".join(str(raw).split()).strip()
    if not text:
        return None
    source = NOT_SPECIFIED
    m = _SOURCE_SUFFIX.search(text)
    if m:
        source = m.group(1).strip() or NOT_SPECIFIED
        text = text[: m.start()].strip()
    if not text:
        return None
    return FactEntry(text, source, subtask_index)


class Coordinator:
    def __init__(self, backend: Backend, *, sampling: SamplingParams | None = None,
                 selection_retries: int = DEFAULT_SELECTION_RETRIES,
                 tracer: Tracer | None = None):
        self.backend = backend
        self.sampling = sampling or SamplingParams()
        self.selection_retries = selection_retries
        self.tracer = tracer

    def _complete(self, prompt: str, purpose: str, **trace_extra) -> str:
        request = make_request([("user", prompt)], sampling=self.sampling)
        completion = self.backend.complete(request)
        if self.tracer:
            self.tracer.emit("gen_turn", agent="coordinator", purpose=purpose,
                             prompt_tokens=completion.usage.prompt_tokens,
                             output_tokens=completion.usage.output_tokens,
                             finish=completion.finish.kind, **trace_extra)
        return completion.text

    # -- routing -------------------------------------------------------------

    def select_expert(self, subtask, profiles: list[ExpertProfile]) -> SelectionDecision:
        """Pick an expert by name, strictly from the registered profiles.

        The model gets selection_retries extra attempts on malformed output
        or an unregistered name; after that the decision falls back to the
        cheapest registered expert so routing never fails open.
        """
        if not profiles:
            raise ValueError("select_expert needs at least one profile")
        names = {p.name for p in profiles}
        prompt = render_template("agent_select", example=SELECT_EXAMPLE,
                                 agent_info=render_agent_info(profiles),
                                 task=subtask.description)
        decision = None
        for attempt in range(self.selection_retries + 1):
            text = self._complete(prompt, "select_expert", attempt=attempt)
            obj = extract_json_object(text)
            if obj:
                name = obj.get("selected_agent_name")
                if isinstance(name, str) and name in names:
                    decision = SelectionDecision(str(obj.get("reason", "")), name, attempt)
                    break
        if decision is None:
            fallback = min(profiles, key=lambda p: p.cost_tier)
            decision = SelectionDecision("fallback", fallback.name, self.selection_retries)
        if self.tracer:
            self.tracer.emit("selection", subtask_index=subtask.index,
                             expert=decision.selected_name, reason=decision.reason,
                             retries_used=decision.retries_used)
        return decision

    # -- distillation --------------------------------------------------------

    def distill(self, subtask, transcript) -> DistillationReport:
        """One backend call that turns the expert transcript into a distilled
        report plus memory entries.

        Parsing is forgiving (direct JSON, then a balanced-object scan over
        the response); if both fail the report degrades to the expert's last
        text with empty memory instead of blocking the session.
        """
        prompt = render_template("distill", example=DISTILL_EXAMPLE,
                                 reasoning_chain=transcript.full_reasoning,
                                 task_description=subtask.description)
        text = self._complete(prompt, "distill", subtask_index=subtask.index)
        obj = extract_json_object(text)
        report = self._parse_distillation(obj, subtask.index) if obj else None
        if report is None:
            report = DistillationReport(
                reasoning_process="",
                final_conclusion=_fallback_conclusion(transcript),
                degraded=True)
        if self.tracer:
            self.tracer.emit("distill", subtask_index=subtask.index,
                             degraded=report.degraded,
                             facts=len(report.fact_entries),
                             resources=len(report.resource_entries),
                             conclusion=report.final_conclusion[:200])
        return report

    def _parse_distillation(self, obj: dict, subtask_index: int) -> DistillationReport | None:
        conclusion = str(obj.get("final_conclusion") or "").strip()
        if not conclusion:
            return None
        facts: list[FactEntry] = []
        raw_facts = obj.get("fact_memory") or []
        if isinstance(raw_facts, list):
            for item in raw_facts:
                if isinstance(item, dict):
                    entry = parse_fact_string(
                        f"{item.get('content', '')} [Source: {item.get('source', '')}]",
                        subtask_index)
                else:
                    entry = parse_fact_string(item, subtask_index)
                if entry:
                    facts.append(entry)
        resources: list[ResourceEntry] = []
        raw_resources = obj.get("resource_memory") or {}
        if isinstance(raw_resources, dict):
            for description, path in raw_resources.items():
                if isinstance(path, str) and path.strip() and str(description).strip():
                    resources.append(ResourceEntry(str(description).strip(), path.strip()))
        elif isinstance(raw_resources, list):
            for item in raw_resources:
                if isinstance(item, dict) and item.get("path") and item.get("description"):
                    resources.append(ResourceEntry(str(item["description"]).strip(),
                                                   str(item["path"]).strip()))
        return DistillationReport(
            reasoning_process=str(obj.get("reasoning_process") or "").strip(),
            final_conclusion=conclusion,
            fact_entries=facts, resource_entries=resources)

    # -- memory filtering ----------------------------------------------------

    def filter_memory(self, subtask, store: MemoryStore) -> list[FactEntry]:
        """At most five entries, each verbatim from the store.

        An empty store short-circuits without a backend call.  Lines the
        model invents are dropped by exact-match lookup against the store;
        an over-long selection is truncated to the cap.  Parse failures
        return an empty selection; they never block dispatch.
        """
        if not store.facts:
            return []
        prompt = render_template("memory_filter",
                                 memory=render_memory(list(store.facts)),
                                 task=subtask.description)
        text = self._complete(prompt, "filter_memory", subtask_index=subtask.index)
        by_line: dict[str, FactEntry] = {}
        for entry in store.facts:
            by_line.setdefault(render_fact_line(entry), entry)
            by_line.setdefault(" ".join(entry.content.split()), entry)
        selected: list[FactEntry] = []
        picked: set[FactEntry] = set()
        for m in _MEMORY_LINE.finditer(text):
            line = m.group(1).strip().strip("`").strip()
            entry = by_line.get(line)
            if entry is not None and entry not in picked:
                picked.add(entry)
                selected.append(entry)
        if len(selected) > MEMORY_FILTER_CAP:
            if self.tracer:
                self.tracer.emit("gen_turn", agent="coordinator", purpose="filter_memory",
                                 subtask_index=subtask.index,
                                 warning=f"filter returned {len(selected)} entries; "
                                         f"truncated to {MEMORY_FILTER_CAP}")
            selected = selected[:MEMORY_FILTER_CAP]
        return selected


def _fallback_conclusion(transcript) -> str:
    text = (transcript.final_text or "").strip()
    if not text:
        for line in reversed(transcript.full_reasoning.splitlines()):
            if line.strip():
                text = line.strip()
                break
    return text or "No conclusion was produced."
