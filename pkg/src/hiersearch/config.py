"""YAML configuration: backends, tool adapters, expert roster, markers.

Secrets never live in config files; backends and live adapters name an
environment variable (api_key_env) and read the key at call time.
Relative paths are resolved against the config file's directory so a
config travels with its fixtures.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from .backend import Backend, HttpChatBackend, SamplingParams, ScriptedBackend
from .coordinator import DEFAULT_SELECTION_RETRIES, Coordinator, ExpertProfile
from .executors import (EXPERT_KINDS, ExpertDefinition, ExpertRegistry,
                        default_expert_definitions)
from .planner import DEFAULT_MAX_SUBTASKS, SessionRunner
from .protocol import MarkerKind, MarkerTable, default_markers
from .tools import (FixtureCodeAdapter, FixtureMediaAdapter, FixturePageAdapter,
                    FixtureSearchAdapter, LiveMediaAdapter, LivePageAdapter,
                    LiveSearchAdapter, SandboxCodeAdapter, ToolInvoker)
from .trace import Tracer

BACKEND_ROLES = ("planner", "coordinator", "expert", "judge")
ADAPTER_NAMES = ("search", "page", "code", "media")
FIXTURE_FILES = {"search": "search.jsonl", "page": "pages.jsonl",
                 "code": "code.jsonl", "media": "media.jsonl"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


def _fail(path: str, detail: str) -> "ConfigError":
    return ConfigError(f"{path}: {detail}")


@dataclass
class BackendConfig:
    kind: str  # "scripted" | "http"
    script: str | None = None
    url: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    supports_top_k: bool = False
    context_budget: int | None = None
    sampling: SamplingParams = field(default_factory=SamplingParams)


@dataclass
class AdapterConfig:
    kind: str
    path: str | None = None
    url: str | None = None
    provider: str = "serper"
    api_key_env: str | None = None
    model: str | None = None


@dataclass
class AppConfig:
    backends: dict
    adapters: dict
    experts: list | None  # None -> built-in roster
    markers: MarkerTable
    max_subtasks: int = DEFAULT_MAX_SUBTASKS
    include_expert_descriptions: bool = True
    selection_retries: int = DEFAULT_SELECTION_RETRIES
    base_dir: str = "."


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def _parse_sampling(obj, path: str) -> SamplingParams:
    if obj is None:
        return SamplingParams()
    if not isinstance(obj, dict):
        raise _fail(path, "must be a mapping")
    known = {"temperature", "top_p", "top_k", "max_new_tokens"}
    unknown = set(obj) - known
    if unknown:
        raise _fail(path, f"unknown keys {sorted(unknown)}")
    try:
        return SamplingParams(**obj)
    except (TypeError, ValueError) as exc:
        raise _fail(path, str(exc)) from None


def _parse_backend(obj, path: str, base_dir: str) -> BackendConfig:
    if not isinstance(obj, dict):
        raise _fail(path, "must be a mapping")
    kind = obj.get("kind")
    if kind not in ("scripted", "http"):
        raise _fail(f"{path}.kind", f"expected 'scripted' or 'http', got {kind!r}")
    cfg = BackendConfig(kind=kind,
                        sampling=_parse_sampling(obj.get("sampling"), f"{path}.sampling"))
    if "context_budget" in obj:
        budget = obj["context_budget"]
        if not isinstance(budget, int) or budget < 1:
            raise _fail(f"{path}.context_budget", "must be a positive integer")
        cfg.context_budget = budget
    if kind == "scripted":
        script = obj.get("script")
        if not isinstance(script, str) or not script:
            raise _fail(f"{path}.script", "scripted backend needs a script path")
        cfg.script = _resolve(base_dir, script)
    else:
        for key in ("url", "model"):
            value = obj.get(key)
            if not isinstance(value, str) or not value:
                raise _fail(f"{path}.{key}", f"http backend needs {key}")
        cfg.url = obj["url"]
        cfg.model = obj["model"]
        cfg.api_key_env = obj.get("api_key_env")
        cfg.supports_top_k = bool(obj.get("supports_top_k", False))
    return cfg


def _parse_adapter(name: str, obj, path: str, base_dir: str) -> AdapterConfig:
    if obj is None:
        obj = {"kind": "fixture"}
    if not isinstance(obj, dict):
        raise _fail(path, "must be a mapping")
    kind = obj.get("kind", "fixture")
    allowed = {"search": ("fixture", "live"), "page": ("fixture", "live"),
               "code": ("fixture", "sandbox"), "media": ("fixture", "live")}[name]
    if kind not in allowed:
        raise _fail(f"{path}.kind", f"expected one of {allowed}, got {kind!r}")
    cfg = AdapterConfig(kind=kind)
    if kind == "fixture":
        if "path" in obj and obj["path"]:
            cfg.path = _resolve(base_dir, str(obj["path"]))
    elif kind == "sandbox":
        url = obj.get("url")
        if not isinstance(url, str) or not url:
            raise _fail(f"{path}.url", "sandbox adapter needs a service url")
        cfg.url = url
    else:  # live
        if name in ("search", "media"):
            url = obj.get("url")
            if not isinstance(url, str) or not url:
                raise _fail(f"{path}.url", f"live {name} adapter needs a url")
            cfg.url = url
        cfg.provider = obj.get("provider", "serper")
        cfg.api_key_env = obj.get("api_key_env")
        cfg.model = obj.get("model")
    return cfg


def _parse_experts(obj, path: str) -> list | None:
    if obj is None:
        return None
    if not isinstance(obj, list) or not obj:
        raise _fail(path, "must be a non-empty list")
    experts = []
    names: set[str] = set()
    for i, item in enumerate(obj):
        at = f"{path}[{i}]"
        if not isinstance(item, dict):
            raise _fail(at, "must be a mapping")
        name = item.get("name")
        kind = item.get("kind")
        if not isinstance(name, str) or not name:
            raise _fail(f"{at}.name", "required")
        if name in names:
            raise _fail(f"{at}.name", f"duplicate expert {name!r}")
        names.add(name)
        if kind not in EXPERT_KINDS:
            raise _fail(f"{at}.kind", f"expected one of {EXPERT_KINDS}, got {kind!r}")
        description = item.get("description")
        if not isinstance(description, str) or not description.strip():
            raise _fail(f"{at}.description", "required")
        cost_tier = item.get("cost_tier", 1)
        if not isinstance(cost_tier, int) or cost_tier < 1:
            raise _fail(f"{at}.cost_tier", "must be a positive integer")
        max_tool_calls = item.get("max_tool_calls", 10)
        if not isinstance(max_tool_calls, int) or max_tool_calls < 1:
            raise _fail(f"{at}.max_tool_calls", "must be a positive integer")
        experts.append(ExpertDefinition(
            ExpertProfile(name, description.strip(), cost_tier), kind,
            max_tool_calls, str(item.get("display_name") or name)))
    return experts


def _parse_markers(obj, path: str) -> MarkerTable:
    if obj is None:
        return default_markers()
    if not isinstance(obj, dict):
        raise _fail(path, "must be a mapping")
    pairs = dict(default_markers().pairs)
    valid = {k.value: k for k in MarkerKind}
    for key, value in obj.items():
        kind = valid.get(key)
        if kind is None:
            raise _fail(f"{path}.{key}", f"unknown marker kind; expected one of "
                                         f"{sorted(valid)}")
        if not isinstance(value, dict) or not value.get("begin") or not value.get("end"):
            raise _fail(f"{path}.{key}", "needs begin and end strings")
        pairs[kind] = (str(value["begin"]), str(value["end"]))
    try:
        return MarkerTable(pairs)
    except ValueError as exc:
        raise _fail(path, str(exc)) from None


def parse_config(obj: dict, base_dir: str = ".") -> AppConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a mapping")
    backends_obj = obj.get("backends")
    if not isinstance(backends_obj, dict):
        raise ConfigError("backends: required mapping with planner/coordinator/"
                          "expert/judge entries")
    backends = {}
    for role in BACKEND_ROLES:
        if role not in backends_obj:
            raise _fail(f"backends.{role}", "required")
        backends[role] = _parse_backend(backends_obj[role], f"backends.{role}", base_dir)
    adapters_obj = obj.get("adapters") or {}
    if not isinstance(adapters_obj, dict):
        raise ConfigError("adapters: must be a mapping")
    adapters = {name: _parse_adapter(name, adapters_obj.get(name),
                                     f"adapters.{name}", base_dir)
                for name in ADAPTER_NAMES}
    max_subtasks = obj.get("max_subtasks", DEFAULT_MAX_SUBTASKS)
    if not isinstance(max_subtasks, int) or max_subtasks < 1:
        raise ConfigError("max_subtasks: must be a positive integer")
    selection_retries = obj.get("selection_retries", DEFAULT_SELECTION_RETRIES)
    if not isinstance(selection_retries, int) or selection_retries < 0:
        raise ConfigError("selection_retries: must be a non-negative integer")
    return AppConfig(
        backends=backends, adapters=adapters,
        experts=_parse_experts(obj.get("experts"), "experts"),
        markers=_parse_markers(obj.get("markers"), "markers"),
        max_subtasks=max_subtasks,
        include_expert_descriptions=bool(obj.get("include_expert_descriptions", True)),
        selection_retries=selection_retries,
        base_dir=base_dir)


def load_config(path: str) -> AppConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return parse_config(obj or {}, base_dir=os.path.dirname(os.path.abspath(path)))


def fixture_adapter_overrides(fixtures_dir: str) -> dict:
    """Adapter configs pointing at <dir>/{search,pages,code,media}.jsonl;
    files that do not exist become empty fixtures."""
    overrides = {}
    for name in ADAPTER_NAMES:
        path = os.path.join(fixtures_dir, FIXTURE_FILES[name])
        overrides[name] = AdapterConfig("fixture",
                                        path=path if os.path.exists(path) else None)
    return overrides


# -- construction ------------------------------------------------------------


def build_backend(cfg: BackendConfig, abort_event=None) -> Backend:
    if cfg.kind == "scripted":
        kwargs = {}
        if cfg.context_budget:
            kwargs["context_budget"] = cfg.context_budget
        return ScriptedBackend.from_jsonl(cfg.script, **kwargs)
    kwargs = {"api_key_env": cfg.api_key_env, "supports_top_k": cfg.supports_top_k,
              "abort_event": abort_event}
    if cfg.context_budget:
        kwargs["context_budget"] = cfg.context_budget
    return HttpChatBackend(cfg.url, cfg.model, **kwargs)


def build_adapter(name: str, cfg: AdapterConfig):
    if cfg.kind == "fixture":
        fixture_cls = {"search": FixtureSearchAdapter, "page": FixturePageAdapter,
                       "code": FixtureCodeAdapter, "media": FixtureMediaAdapter}[name]
        return fixture_cls.from_jsonl(cfg.path) if cfg.path else fixture_cls()
    if cfg.kind == "sandbox":
        return SandboxCodeAdapter(cfg.url)
    if name == "search":
        return LiveSearchAdapter(cfg.url, provider=cfg.provider,
                                 api_key_env=cfg.api_key_env)
    if name == "page":
        return LivePageAdapter()
    return LiveMediaAdapter(cfg.url, model=cfg.model or "Qwen2.5-Omni-7B",
                            api_key_env=cfg.api_key_env)


class Runtime:
    """Long-lived backends and adapters plus a per-session runner factory.

    Backends and adapters are shared across sessions (they are thread-safe
    or stateless); each session gets its own tracer, invoker cache,
    coordinator, and registry so accounting never bleeds across items.
    """

    def __init__(self, config: AppConfig, abort_event=None):
        self.config = config
        self.backends = {role: build_backend(cfg, abort_event)
                         for role, cfg in config.backends.items()}
        self.adapters = {name: build_adapter(name, cfg)
                         for name, cfg in config.adapters.items()}
        self.expert_definitions = config.experts or default_expert_definitions()

    @property
    def judge_backend(self) -> Backend:
        return self.backends["judge"]

    def new_session_runner(self, session_id: str = "session",
                           tracer: Tracer | None = None) -> tuple[SessionRunner, Tracer]:
        tracer = tracer or Tracer(session_id)
        invoker = ToolInvoker(search=self.adapters["search"],
                              page=self.adapters["page"],
                              code=self.adapters["code"],
                              media=self.adapters["media"], tracer=tracer)
        coordinator = Coordinator(self.backends["coordinator"],
                                  sampling=self.config.backends["coordinator"].sampling,
                                  selection_retries=self.config.selection_retries,
                                  tracer=tracer)
        registry = ExpertRegistry(self.expert_definitions, self.backends["expert"],
                                  markers=self.config.markers,
                                  sampling=self.config.backends["expert"].sampling,
                                  tracer=tracer)
        runner = SessionRunner(self.backends["planner"], coordinator, registry,
                               invoker, markers=self.config.markers,
                               sampling=self.config.backends["planner"].sampling,
                               max_subtasks=self.config.max_subtasks,
                               include_expert_descriptions=
                               self.config.include_expert_descriptions,
                               tracer=tracer)
        return runner, tracer
