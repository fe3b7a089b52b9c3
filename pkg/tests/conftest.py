import json
import os

import pytest

from hiersearch.backend import ScriptedBackend, ScriptRule

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

ASEAN_QUESTION = (
    "In terms of geographical distance between capital cities, which 2 "
    "countries are the furthest from each other within the ASEAN bloc "
    "according to wikipedia? Answer using a comma separated list, ordering "
    "the countries by alphabetical order.")


def scripted(rules, **kwargs):
    """Build a ScriptedBackend from a list of rule dicts."""
    parsed = [ScriptRule(match=r["match"], response=r["response"],
                         finish=r.get("finish", "stop"),
                         regex=r.get("regex", False),
                         times=r.get("times"))
              for r in rules]
    kwargs.setdefault("name", "test")
    return ScriptedBackend(parsed, **kwargs)


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


@pytest.fixture
def asean_config_path():
    return os.path.join(FIXTURES, "asean", "config.yaml")


@pytest.fixture
def asean_dataset_path():
    return os.path.join(FIXTURES, "asean", "dataset.jsonl")
