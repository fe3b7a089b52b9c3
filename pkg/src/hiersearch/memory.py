"""Dual-channel session memory: fact entries and resource entries.

The store is session-scoped and owned by the session runner; merge and
upsert are pure functions returning a new store so callers can reason
about them algebraically (dedup is idempotent, eviction is a total
order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

DEFAULT_MAX_FACTS = 200
DEFAULT_MAX_RESOURCES = 100
NOT_SPECIFIED = "Not Specified"


@dataclass(frozen=True)
class FactEntry:
    content: str
    source: str  # URL, file, page title, "Model Inference", or "Not Specified"
    first_seen_subtask: int


@dataclass(frozen=True)
class ResourceEntry:
    description: str
    path: str  # URL or local path


@dataclass(frozen=True)
class MemoryStore:
    facts: tuple[FactEntry, ...] = ()
    resources: tuple[ResourceEntry, ...] = ()
    max_facts: int = DEFAULT_MAX_FACTS
    max_resources: int = DEFAULT_MAX_RESOURCES


def normalize_content(content: str) -> str:
    """Dedup normalization: case-folded, whitespace-collapsed."""
    return " ".join(content.split()).casefold()


def _fact_key(entry: FactEntry) -> tuple[str, str]:
    return (normalize_content(entry.content), entry.source)


def merge_facts(store: MemoryStore, new_entries: Iterable[FactEntry],
                tracer=None) -> MemoryStore:
    """Merge entries with (normalized content, source) dedup.

    Same-source entries stay grouped together; distinct contents from one
    source are all kept.  When the cap is exceeded the oldest entries
    (lowest first_seen_subtask, ties broken by the normalized key) are
    evicted first.
    """
    facts = list(store.facts)
    seen = {_fact_key(f) for f in facts}
    for raw in new_entries:
        content = raw.content.strip()
        if not content:
            continue
        source = raw.source.strip() or NOT_SPECIFIED
        entry = FactEntry(content, source, raw.first_seen_subtask)
        key = _fact_key(entry)
        if key in seen:
            continue
        seen.add(key)
        # keep the store grouped by source: insert after the last entry
        # that shares this source, else append
        insert_at = len(facts)
        for i in range(len(facts) - 1, -1, -1):
            if facts[i].source == source:
                insert_at = i + 1
                break
        facts.insert(insert_at, entry)
    while len(facts) > store.max_facts:
        victim = min(facts, key=lambda f: (f.first_seen_subtask, _fact_key(f)))
        facts.remove(victim)
        if tracer is not None:
            tracer.emit("elide", channel="memory", evicted_fact=victim.content[:120],
                        first_seen_subtask=victim.first_seen_subtask)
    return replace(store, facts=tuple(facts))


def upsert_resources(store: MemoryStore, new_entries: Iterable[ResourceEntry],
                     tracer=None) -> MemoryStore:
    """Path-keyed upsert: a new description for an existing path replaces
    the old one in place; eviction is insertion-ordered."""
    resources = list(store.resources)
    index = {r.path: i for i, r in enumerate(resources)}
    for raw in new_entries:
        path = raw.path.strip()
        description = raw.description.strip()
        if not path or not description:
            continue
        entry = ResourceEntry(description, path)
        if path in index:
            resources[index[path]] = entry
        else:
            index[path] = len(resources)
            resources.append(entry)
    while len(resources) > store.max_resources:
        victim = resources.pop(0)
        index = {r.path: i for i, r in enumerate(resources)}
        if tracer is not None:
            tracer.emit("elide", channel="memory", evicted_resource=victim.path)
    return replace(store, resources=tuple(resources))


def render_fact_line(entry: FactEntry) -> str:
    content = " ".join(entry.content.split())
    return f"{content} [Source: {entry.source}]"


def render_memory(entries: Sequence[FactEntry]) -> str:
    """Numbered single-line rendering used in prompts.

    Empty input renders to the empty string.
    """
    return "\n".join(f"Memory Fact {i}: {render_fact_line(e)}"
                     for i, e in enumerate(entries, 1))


def export_jsonl(store: MemoryStore, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in store.facts:
            fh.write(json.dumps({"content": f.content, "source": f.source,
                                 "first_seen_subtask": f.first_seen_subtask},
                                ensure_ascii=False) + "\n")
        for r in store.resources:
            fh.write(json.dumps({"description": r.description, "path": r.path},
                                ensure_ascii=False) + "\n")


def load_jsonl(path: str, max_facts: int = DEFAULT_MAX_FACTS,
               max_resources: int = DEFAULT_MAX_RESOURCES) -> MemoryStore:
    facts: list[FactEntry] = []
    resources: list[ResourceEntry] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "content" in obj:
                facts.append(FactEntry(obj["content"], obj.get("source", NOT_SPECIFIED),
                                       int(obj.get("first_seen_subtask", 0))))
            elif "path" in obj:
                resources.append(ResourceEntry(obj["description"], obj["path"]))
            else:
                raise ValueError(f"{path}:{lineno}: entry is neither fact nor resource")
    return MemoryStore(tuple(facts), tuple(resources), max_facts, max_resources)
