"""Operator entry points: ask one question, run a benchmark, re-score a
prediction file, or replay a trace offline."""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading

from .backend import MalformedResponseError
from .config import ConfigError, Runtime, fixture_adapter_overrides, load_config
from .evaluate import (judge, load_dataset, load_results, metrics_from_rows,
                       run_benchmark, write_results)
from .planner import SessionStatus
from .trace import load_trace

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILED = 2
EXIT_NO_ANSWER = 3


def _add_config_flags(parser: argparse.ArgumentParser, *, runtime: bool = True):
    parser.add_argument("--config", required=True, help="YAML config file")
    if runtime:
        parser.add_argument("--fixtures", metavar="DIR",
                            help="override all adapters with fixtures from DIR "
                                 "(search.jsonl, pages.jsonl, code.jsonl, media.jsonl)")
        parser.add_argument("--max-subtasks", type=int, metavar="N")
        parser.add_argument("--no-expert-descriptions", action="store_true",
                            help="planner prompt lists expert names only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiersearch",
        description="Hierarchical deep-search sessions: a planner delegates "
                    "subtasks to tool-using experts and reasons over distilled "
                    "results.")
    sub = parser.add_subparsers(dest="command", required=True)

    ask = sub.add_parser("ask", help="answer a single question")
    ask.add_argument("question")
    _add_config_flags(ask)
    ask.add_argument("--trace", metavar="PATH", help="write the trace JSONL here")
    ask.add_argument("--session-id", default=None)

    bench = sub.add_parser("bench", help="run a benchmark dataset")
    bench.add_argument("dataset", help="JSONL with id/question/answer rows")
    _add_config_flags(bench)
    bench.add_argument("--judge-template", choices=("general", "webwalker"),
                       default="general")
    bench.add_argument("--max-parallel", type=int, default=4)
    bench.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True,
                       help="count unanswered sessions as incorrect (default)")
    bench.add_argument("--out", metavar="PATH", help="write result rows + metrics here")
    bench.add_argument("--trace-dir", metavar="DIR",
                       help="write one trace file per item here")

    judge_cmd = sub.add_parser("judge", help="re-score an existing prediction file")
    judge_cmd.add_argument("predictions", help="results JSONL, or any JSONL with "
                                               "id and answer fields")
    judge_cmd.add_argument("--dataset", required=True)
    _add_config_flags(judge_cmd, runtime=False)
    judge_cmd.add_argument("--judge-template", choices=("general", "webwalker"),
                           default="general")
    judge_cmd.add_argument("--strict", action=argparse.BooleanOptionalAction,
                           default=True)
    judge_cmd.add_argument("--out", metavar="PATH")

    replay = sub.add_parser("replay", help="render a trace file; no model or "
                                           "tool calls are made")
    replay.add_argument("trace")
    return parser


def _build_runtime(args, abort_event=None) -> Runtime:
    config = load_config(args.config)
    if getattr(args, "fixtures", None):
        config.adapters.update(fixture_adapter_overrides(args.fixtures))
    if getattr(args, "max_subtasks", None):
        if args.max_subtasks < 1:
            raise ConfigError("--max-subtasks must be >= 1")
        config.max_subtasks = args.max_subtasks
    if getattr(args, "no_expert_descriptions", False):
        config.include_expert_descriptions = False
    return Runtime(config, abort_event)


def _install_abort(abort_event: threading.Event):
    def handler(signum, frame):
        abort_event.set()
    try:
        signal.signal(signal.SIGINT, handler)
        signal.signal(signal.SIGTERM, handler)
    except ValueError:
        pass  # not the main thread (tests); aborting stays manual


def cmd_ask(args) -> int:
    abort_event = threading.Event()
    _install_abort(abort_event)
    runtime = _build_runtime(args, abort_event)
    runner, tracer = runtime.new_session_runner(args.session_id or "ask")
    session = runner.run(args.question, session_id=args.session_id)
    if args.trace:
        tracer.write_jsonl(args.trace)
    print(f"status: {session.status.value}  subtasks: {session.subtasks_used}  "
          f"planner_tokens: {session.planner_output_tokens}  "
          f"total_tokens: {session.total_output_tokens}", file=sys.stderr)
    if session.final_answer is not None:
        print(session.final_answer)
    if session.status is SessionStatus.ANSWERED:
        return EXIT_OK
    if session.status is SessionStatus.BUDGET_EXHAUSTED:
        return EXIT_OK if session.final_answer is not None else EXIT_NO_ANSWER
    print(f"session failed: {session.failure_reason}", file=sys.stderr)
    return EXIT_FAILED


def cmd_bench(args) -> int:
    runtime = _build_runtime(args)
    items = load_dataset(args.dataset)

    def progress(row):
        print(f"  {row.item_id}: {row.status} "
              f"{row.verdict or '-'} ({row.wall_time_s:.2f}s)", file=sys.stderr)

    rows, metrics = run_benchmark(
        items, runtime.new_session_runner, runtime.judge_backend,
        judge_template=args.judge_template, strict=args.strict,
        max_parallel=args.max_parallel, trace_dir=args.trace_dir,
        progress=progress)
    for row in rows:
        print(json.dumps({"kind": "item", **row.to_dict()}, ensure_ascii=False))
    print(json.dumps({"kind": "metrics", "strict": args.strict,
                      **metrics.to_dict()}, ensure_ascii=False))
    if args.out:
        write_results(args.out, rows, metrics, args.strict)
    return EXIT_OK


def cmd_judge(args) -> int:
    runtime = _build_runtime(args)
    rows, _ = load_results(args.predictions)
    if not rows:
        raise ConfigError(f"{args.predictions}: no prediction rows")
    items = {item.id: item for item in load_dataset(args.dataset)}
    for row in rows:
        item = items.get(row.item_id)
        if item is None:
            raise ConfigError(f"prediction id {row.item_id!r} not in {args.dataset}")
        if row.answer is None:
            row.verdict = None
            continue
        verdict = judge(runtime.judge_backend, item.question, item.answer,
                        row.answer, template=args.judge_template)
        row.verdict = "correct" if verdict.correct else "incorrect"
        row.judge_parse_failed = verdict.parse_failed
    metrics = metrics_from_rows(rows, strict=args.strict)
    for row in rows:
        print(json.dumps({"kind": "item", **row.to_dict()}, ensure_ascii=False))
    print(json.dumps({"kind": "metrics", "strict": args.strict,
                      **metrics.to_dict()}, ensure_ascii=False))
    if args.out:
        write_results(args.out, rows, metrics, args.strict)
    return EXIT_OK


def _preview(text: str, limit: int = 100) -> str:
    flat = " ".join(text.split())
    return flat if len(flat) <= limit else flat[:limit - 3] + "..."


def cmd_replay(args) -> int:
    """Offline rendering of a recorded session; never touches backends."""
    events = load_trace(args.trace)
    out = sys.stdout
    for ev in events:
        p = ev.payload
        if ev.kind == "gen_turn" and p.get("agent") == "planner":
            text = p.get("appended_planner_text", "")
            if text.strip():
                out.write(text if text.endswith("\n") else text + "\n")
        elif ev.kind == "subtask_call":
            out.write(f"\n▶ subtask {p.get('index')}: "
                      f"{_preview(p.get('description', ''), 200)}\n")
        elif ev.kind == "selection":
            out.write(f"    routed to {p.get('expert')}"
                      f" ({_preview(p.get('reason', ''), 80)})\n")
        elif ev.kind == "tool_call":
            detail = p.get("query") or p.get("url") or p.get("code") or p.get("path") or ""
            flags = " [cached]" if p.get("cached") else ""
            out.write(f"    ⚙ {p.get('op')}{flags}: {_preview(str(detail))}\n")
        elif ev.kind == "inject":
            out.write(f"◀ result {p.get('index')}:\n")
            for line in p.get("content", "").strip().splitlines():
                out.write(f"    {line}\n")
        elif ev.kind == "elide":
            if p.get("channel") == "transcript":
                out.write(f"    (result {p.get('subtask_index')} elided from "
                          f"later prompts)\n")
        elif ev.kind == "terminate":
            out.write(f"\n■ {p.get('status')} ({p.get('reason')})")
            if p.get("final_answer"):
                out.write(f": {p['final_answer']}")
            out.write("\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"ask": cmd_ask, "bench": cmd_bench, "judge": cmd_judge,
                "replay": cmd_replay}
    try:
        return handlers[args.command](args)
    except (ConfigError, MalformedResponseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
