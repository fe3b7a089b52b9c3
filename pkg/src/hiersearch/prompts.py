"""Instruction template assets.

Templates ship as plain-text files with named {placeholder} fields.  They
are rendered by literal replacement rather than str.format because most of
them legitimately contain JSON braces.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

TEMPLATE_NAMES = (
    "planner", "agent_select", "distill", "memory_filter",
    "query_plan", "search_answer", "code_agent", "multimodal_agent",
    "deep_search_agent", "judge_general", "judge_webwalker",
)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    path = resources.files("hiersearch.templates").joinpath(f"{name}.txt")
    return path.read_text(encoding="utf-8")


def render(template: str, **fields) -> str:
    out = template
    for key, value in fields.items():
        out = out.replace("{" + key + "}", str(value))
    return out


def render_template(name: str, **fields) -> str:
    return render(load_template(name), **fields)
