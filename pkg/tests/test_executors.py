import pytest

from hiersearch.executors import (
    TOOL_LIMIT_NOTICE,
    ExpertDefinition,
    ExpertRegistry,
    code_execute,
    deep_search_execute,
    default_expert_definitions,
    multimodal_execute,
    parse_multimodal_payload,
    parse_query_plan,
    simple_search_execute,
    strip_code_payload,
)
from hiersearch.coordinator import ExpertProfile
from hiersearch.planner import Subtask
from hiersearch.protocol import MarkerKind, default_markers, extract_blocks, scan_text
from hiersearch.tools import (
    CodeExecutionResult,
    FixtureCodeAdapter,
    FixtureMediaAdapter,
    FixturePageAdapter,
    FixtureSearchAdapter,
    MediaAnalysisResult,
    SearchResult,
    ToolInvoker,
)
from hiersearch.trace import Tracer
from tests.conftest import scripted

M = default_markers()
CODE_TASK = Subtask(1, "Compute six times seven with code.")


def code_call(code, pre="Let me run it.\n"):
    return f"{pre}{M.begin(MarkerKind.CODE_CALL)}python\n{code}\n{M.end(MarkerKind.CODE_CALL)}"


def code_invoker(**results):
    table = {code: CodeExecutionResult(out, "", 0, 3) for code, out in results.items()}
    return ToolInvoker(code=FixtureCodeAdapter(table))


class TestPayloadParsing:
    @pytest.mark.parametrize("payload,expected", [
        ("python\nprint(1)", "print(1)"),
        ("python print(1)", "print(1)"),
        ("```python\nprint(1)\n```", "print(1)"),
        ("```\nprint(1)\n```", "print(1)"),
        ("print(1)", "print(1)"),
        ("python", ""),
        ("  python\n  x = 1\n", "x = 1"),
    ])
    def test_strip_code_payload(self, payload, expected):
        assert strip_code_payload(payload) == expected

    @pytest.mark.parametrize("payload,expected", [
        ("data: [a.png] question: [what?]", ("a.png", "what?")),
        ("data: a.png question: what?", ("a.png", "what?")),
        ("data:a.png\nquestion:what is it", ("a.png", "what is it")),
        ("question: [q] data: [a.png]", None),  # out of order
        ("data: [a.png]", None),
        ("question: [q]", None),
        ("data: [] question: [q]", None),
        ("look at the picture", None),
    ])
    def test_parse_multimodal_payload(self, payload, expected):
        assert parse_multimodal_payload(payload) == expected

    def test_parse_query_plan_valid(self):
        text = 'plan:\n```json\n{"query_plan": ["  a  query ", "second"]}\n```'
        assert parse_query_plan(text, "fb") == (["a query", "second"], False)

    def test_parse_query_plan_caps(self):
        text = '{"query_plan": ["q1", "q2", "q3", "q4"]}'
        queries, _ = parse_query_plan(text, "fb", cap=2)
        assert queries == ["q1", "q2"]

    @pytest.mark.parametrize("text", [
        "not json", '{"query_plan": []}', '{"query_plan": "one"}', '{"other": 1}',
    ])
    def test_parse_query_plan_fallback(self, text):
        assert parse_query_plan(text, "  the   fallback ") == (["the fallback"], True)


class TestToolLoop:
    def test_direct_answer_without_tools(self):
        backend = scripted([{"match": CODE_TASK.description,
                             "response": "No tools needed. \\boxed{42}"}])
        t = code_execute(CODE_TASK, "", backend, code_invoker())
        assert t.tool_log == []
        assert t.final_text == "No tools needed. \\boxed{42}"
        assert t.full_reasoning == t.final_text

    def test_single_call_round_trip(self):
        backend = scripted([
            {"match": "Execution result (exit 0", "response": "It is 42.\n\\boxed{42}"},
            {"match": CODE_TASK.description,
             "response": code_call("print(6*7)") + " trailing text"},
        ])
        t = code_execute(CODE_TASK, "", backend, code_invoker(**{"print(6*7)": "42\n"}))
        assert len(t.tool_log) == 1
        log = t.tool_log[0]
        assert log.kind is MarkerKind.CODE_CALL and log.ok
        assert log.request_payload == "python\nprint(6*7)"
        assert "42" in log.result_payload
        assert t.final_text == "It is 42.\n\\boxed{42}"

    def test_transcript_blocks_match_tool_log(self):
        backend = scripted([
            {"match": "Execution result", "response": "done \\boxed{42}"},
            {"match": CODE_TASK.description, "response": code_call("print(6*7)")},
        ])
        t = code_execute(CODE_TASK, "", backend, code_invoker(**{"print(6*7)": "42\n"}))
        calls = extract_blocks(t.full_reasoning, MarkerKind.CODE_CALL)
        results = extract_blocks(t.full_reasoning, MarkerKind.CODE_RESULT)
        assert [b.payload for b in calls] == [t.tool_log[0].request_payload]
        assert [b.payload for b in results] == [t.tool_log[0].result_payload]

    def test_budget_blocks_call_and_forces_answer(self):
        backend = scripted([
            {"match": TOOL_LIMIT_NOTICE, "response": "Best guess: \\boxed{42}"},
            {"match": "Execution result", "response": code_call("print(6*7)")},
            {"match": CODE_TASK.description, "response": code_call("print(2+2)")},
        ])
        invoker = code_invoker(**{"print(2+2)": "4\n", "print(6*7)": "42\n"})
        t = code_execute(CODE_TASK, "", backend, invoker, max_tool_calls=1)
        assert len(t.tool_log) == 1  # second call was refused
        assert TOOL_LIMIT_NOTICE in t.full_reasoning
        assert t.final_text == "Best guess: \\boxed{42}"
        assert backend.calls == 3

    def test_transcript_always_rescans_cleanly(self):
        # terminal text carrying a stray marker is defused, blocked calls too
        backend = scripted([
            {"match": TOOL_LIMIT_NOTICE,
             "response": "the marker was " + M.begin(MarkerKind.CODE_CALL)[:8]},
            {"match": "Execution result", "response": code_call("print(6*7)")},
            {"match": CODE_TASK.description, "response": code_call("print(2+2)")},
        ])
        invoker = code_invoker(**{"print(2+2)": "4\n"})
        t = code_execute(CODE_TASK, "", backend, invoker, max_tool_calls=1)
        scan_text(t.full_reasoning)  # must not raise

    def test_length_finish_never_dispatches(self):
        # generation ran out mid-call: begin marker present, no end marker
        cut = "working\n" + M.begin(MarkerKind.CODE_CALL) + "python\nprint(1)"
        backend = scripted([{"match": CODE_TASK.description,
                             "response": cut, "finish": "length"}])
        t = code_execute(CODE_TASK, "", backend, code_invoker())
        assert t.tool_log == []
        scan_text(t.full_reasoning)

    def test_empty_call_payload_is_terminal(self):
        response = ("hmm " + M.begin(MarkerKind.CODE_CALL)
                    + M.end(MarkerKind.CODE_CALL) + " after")
        backend = scripted([{"match": CODE_TASK.description, "response": response}])
        t = code_execute(CODE_TASK, "", backend, code_invoker())
        assert t.tool_log == []
        assert "hmm" in t.final_text

    def test_backend_failure_mid_loop(self):
        # first turn dispatches; no rule matches the second turn
        backend = scripted([{"match": CODE_TASK.description,
                             "response": code_call("print(6*7)"), "times": 1}])
        t = code_execute(CODE_TASK, "", backend, code_invoker(**{"print(6*7)": "42\n"}))
        assert len(t.tool_log) == 1 and not t.tool_log[0].ok
        assert "[expert backend failure:" in t.final_text
        assert t.final_text in t.full_reasoning

    def test_memory_context_rendered_into_prompt(self):
        backend = scripted([
            {"match": "Memory Fact 1: the sky is blue", "response": "used memory"},
            {"match": "", "response": "no memory seen"},
        ])
        t = code_execute(CODE_TASK, "Memory Fact 1: the sky is blue [Source: s]",
                         backend, code_invoker())
        assert t.final_text == "used memory"

    def test_empty_memory_renders_placeholder(self):
        backend = scripted([
            {"match": "Current Memory: Empty.", "response": "empty placeholder"},
            {"match": "", "response": "other"},
        ])
        t = code_execute(CODE_TASK, "", backend, code_invoker())
        assert t.final_text == "empty placeholder"

    def test_gen_turns_traced(self):
        tracer = Tracer("s")
        backend = scripted([
            {"match": "Execution result", "response": "\\boxed{42}"},
            {"match": CODE_TASK.description, "response": code_call("print(6*7)")},
        ])
        code_execute(CODE_TASK, "", backend, code_invoker(**{"print(6*7)": "42\n"}),
                     tracer=tracer)
        gen = [e for e in tracer.events if e.kind == "gen_turn"]
        assert len(gen) == 2
        assert all(e.payload["agent"] == "code-agent" and
                   e.payload["purpose"] == "expert_turn" for e in gen)


class TestCodeExpert:
    def test_empty_code_block_fails_without_invoking(self):
        adapter = FixtureCodeAdapter()
        invoker = ToolInvoker(code=adapter)
        backend = scripted([
            {"match": "empty code block", "response": "cannot run \\boxed{unknown}"},
            {"match": CODE_TASK.description,
             "response": M.begin(MarkerKind.CODE_CALL) + "python\n"
                         + M.end(MarkerKind.CODE_CALL)},
        ])
        t = code_execute(CODE_TASK, "", backend, invoker)
        assert len(t.tool_log) == 1 and not t.tool_log[0].ok
        assert adapter.calls == 0


class TestMultimodalExpert:
    TASK = Subtask(2, "Describe the attached picture.")

    def test_labeled_call_round_trip(self):
        media = FixtureMediaAdapter({("photo.png", "what is shown?"):
                                     MediaAnalysisResult("a dog")})
        invoker = ToolInvoker(media=media)
        call = (M.begin(MarkerKind.MULTIMODAL_CALL)
                + " data: [photo.png] question: [what is shown?] "
                + M.end(MarkerKind.MULTIMODAL_CALL))
        backend = scripted([
            {"match": "a dog", "response": "The picture shows \\boxed{a dog}"},
            {"match": self.TASK.description, "response": "looking\n" + call},
        ])
        t = multimodal_execute(self.TASK, "", backend, invoker)
        assert t.tool_log[0].result_payload == "a dog"
        assert t.final_text.endswith("\\boxed{a dog}")

    def test_malformed_payload_becomes_failed_interaction(self):
        invoker = ToolInvoker(media=FixtureMediaAdapter())
        call = (M.begin(MarkerKind.MULTIMODAL_CALL) + " just look at it "
                + M.end(MarkerKind.MULTIMODAL_CALL))
        backend = scripted([
            {"match": "malformed multimodal", "response": "giving up"},
            {"match": self.TASK.description, "response": call},
        ])
        t = multimodal_execute(self.TASK, "", backend, invoker)
        assert len(t.tool_log) == 1 and not t.tool_log[0].ok


class TestDeepSearchExpert:
    TASK = Subtask(3, "Find the capital of France the long way.")

    def _invoker(self):
        search = FixtureSearchAdapter({"capital of France": [
            SearchResult(1, "France", "https://x/1", "The capital is Paris.")]})
        page = FixturePageAdapter({"https://x/1": (200, "Paris is the capital.")})
        return ToolInvoker(search=search, page=page), search, page

    def _q(self, payload):
        return (M.begin(MarkerKind.SEARCH_QUERY) + payload
                + M.end(MarkerKind.SEARCH_QUERY))

    def test_search_then_visit_then_answer(self):
        invoker, search, page = self._invoker()
        backend = scripted([
            {"match": "Page content from", "response": "\\boxed{Paris}"},
            {"match": "Document 1: France", "response": self._q("visit: https://x/1")},
            {"match": self.TASK.description, "response": self._q("capital of France")},
        ])
        t = deep_search_execute(self.TASK, "", backend, invoker)
        assert [i.request_payload for i in t.tool_log] == \
            ["capital of France", "visit: https://x/1"]
        assert search.calls == 1 and page.calls == 1
        assert t.final_text == "\\boxed{Paris}"

    def test_visit_without_url_fails(self):
        invoker, _, _ = self._invoker()
        backend = scripted([
            {"match": "visit directive without a url", "response": "stopping"},
            {"match": self.TASK.description, "response": self._q("visit:")},
        ])
        t = deep_search_execute(self.TASK, "", backend, invoker)
        assert not t.tool_log[0].ok


class TestSimpleSearchExpert:
    TASK = Subtask(4, "Who wrote the novel Dune?")

    def _invoker(self, queries=("dune author", "dune novel writer")):
        mapping = {q: [SearchResult(1, f"hit for {q}", "https://x", "Frank Herbert")]
                   for q in queries}
        adapter = FixtureSearchAdapter(mapping)
        return ToolInvoker(search=adapter), adapter

    def test_two_phase_flow(self):
        invoker, adapter = self._invoker()
        backend = scripted([
            {"match": "Document 1: hit for dune author",
             "response": "Frank Herbert wrote it."},
            {"match": "query plan",
             "response": '{"query_plan": ["dune author", "dune novel writer"]}'},
        ])
        t = simple_search_execute(self.TASK, "", backend, invoker)
        assert adapter.calls == 2
        assert [i.request_payload for i in t.tool_log] == \
            ["dune author", "dune novel writer"]
        assert all(i.kind is MarkerKind.SEARCH_QUERY for i in t.tool_log)
        assert t.final_text == "Frank Herbert wrote it."
        # transcript carries one query/result block pair per search
        calls = extract_blocks(t.full_reasoning, MarkerKind.SEARCH_QUERY)
        assert [b.payload for b in calls] == ["dune author", "dune novel writer"]

    def test_fallback_to_subtask_text_on_bad_plan(self):
        tracer = Tracer("s")
        invoker, adapter = self._invoker(queries=(self.TASK.description,))
        backend = scripted([
            {"match": "Document 1:", "response": "answer"},
            {"match": "query plan", "response": "no json today"},
        ])
        t = simple_search_execute(self.TASK, "", backend, invoker, tracer=tracer)
        assert [i.request_payload for i in t.tool_log] == [self.TASK.description]
        warnings = [e for e in tracer.events
                    if e.kind == "gen_turn" and "warning" in e.payload]
        assert len(warnings) == 1

    def test_query_plan_cap_enforced(self):
        queries = tuple(f"q{i}" for i in range(10))
        invoker, adapter = self._invoker(queries=queries)
        plan = '{"query_plan": [' + ", ".join(f'"q{i}"' for i in range(10)) + "]}"
        backend = scripted([
            {"match": "Document 1:", "response": "done"},
            {"match": "query plan", "response": plan},
        ])
        t = simple_search_execute(self.TASK, "", backend, invoker, query_plan_cap=3)
        assert adapter.calls == 3 and len(t.tool_log) == 3

    def test_memory_context_prefixes_documents(self):
        invoker, _ = self._invoker()
        backend = scripted([
            {"match": "Previous exploration results:\nMemory Fact 1: known fact",
             "response": "used the memory"},
            {"match": "Document 1:", "response": "ignored it"},
            {"match": "query plan", "response": '{"query_plan": ["dune author"]}'},
        ])
        t = simple_search_execute(self.TASK, "Memory Fact 1: known fact [Source: s]",
                                  backend, invoker)
        assert t.final_text == "used the memory"

    def test_no_results_renders_placeholder(self):
        invoker = ToolInvoker(search=FixtureSearchAdapter())  # empty for all queries
        backend = scripted([
            {"match": "No results found.", "response": "nothing retrieved"},
            {"match": "query plan", "response": '{"query_plan": ["unknown"]}'},
        ])
        t = simple_search_execute(self.TASK, "", backend, invoker)
        assert t.final_text == "nothing retrieved"

    def test_plan_backend_failure(self):
        invoker, _ = self._invoker()
        backend = scripted([])  # nothing matches
        t = simple_search_execute(self.TASK, "", backend, invoker)
        assert t.tool_log == []
        assert t.final_text.startswith("[expert backend failure:")

    def test_answer_backend_failure_marks_last_interaction(self):
        invoker, _ = self._invoker()
        backend = scripted([{"match": "query plan",
                             "response": '{"query_plan": ["dune author"]}'}])
        t = simple_search_execute(self.TASK, "", backend, invoker)
        assert len(t.tool_log) == 1 and not t.tool_log[0].ok
        assert "[expert backend failure:" in t.final_text


class TestExpertRegistry:
    def test_default_definitions(self):
        defs = {d.profile.name: d for d in default_expert_definitions()}
        assert set(defs) == {"search-agent", "code-agent", "multimodal-agent",
                             "deep-search-agent"}
        assert defs["search-agent"].profile.cost_tier == 1
        assert defs["deep-search-agent"].profile.cost_tier == 3
        assert defs["code-agent"].max_tool_calls == 10

    def test_display_names(self):
        reg = ExpertRegistry(default_expert_definitions(), scripted([]))
        assert reg.display_name("search-agent") == "Search Agent"
        assert reg.display_name("code-agent") == "Code-Agent"

    def test_duplicate_names_rejected(self):
        d = default_expert_definitions()[0]
        with pytest.raises(ValueError, match="duplicate"):
            ExpertRegistry([d, d], scripted([]))

    def test_empty_registry_rejected(self):
        with pytest.raises(ValueError):
            ExpertRegistry([], scripted([]))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown expert kind"):
            ExpertDefinition(ExpertProfile("x", "d"), "quantum", 3, "X")

    def test_run_sets_current_expert_on_invoker(self):
        backend = scripted([{"match": "", "response": "direct answer"}])
        reg = ExpertRegistry(default_expert_definitions(), backend)
        invoker = code_invoker()
        t = reg.run("code-agent", CODE_TASK, "", invoker)
        assert invoker.current_expert == "code-agent"
        assert t.expert_name == "code-agent"

    def test_run_unknown_name_raises(self):
        reg = ExpertRegistry(default_expert_definitions(), scripted([]))
        with pytest.raises(KeyError):
            reg.run("pilot-agent", CODE_TASK, "", code_invoker())
