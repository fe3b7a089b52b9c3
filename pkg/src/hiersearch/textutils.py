"""Small text-parsing helpers shared across modules: tolerant JSON object
extraction and boxed-answer parsing."""

from __future__ import annotations

import json
import re


def extract_json_object(text: str):
    """Best-effort extraction of a JSON object from model output.

    Tries a direct parse first, then scans for the outermost balanced
    object (handles prose around the JSON and code fences).  Returns the
    parsed dict, or None when nothing parseable is found.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            pass
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text[idx:])
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            pass
        idx = text.find("{", idx + 1)
    return None


_BOXED = re.compile(r"boxed\{")


def extract_boxed(text: str) -> list[str]:
    """Contents of every balanced boxed{...} expression, in order.

    Accepts both the plain spelling and the LaTeX \\boxed{...} form; an
    unbalanced occurrence is skipped.
    """
    found: list[str] = []
    for m in _BOXED.finditer(text):
        depth = 1
        start = m.end()
        for i in range(start, len(text)):
            c = text[i]
            if c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    found.append(text[start:i])
                    break
    return found


def last_boxed(text: str) -> str | None:
    boxed = extract_boxed(text)
    return boxed[-1] if boxed else None


def last_paragraph(text: str) -> str:
    """Last non-empty paragraph (blank-line separated), stripped."""
    for para in reversed(re.split(r"\n\s*\n", text)):
        para = para.strip()
        if para:
            return para
    return ""
