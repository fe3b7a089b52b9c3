import json

import httpx
import pytest

from hiersearch.tools import (
    CodeExecutionResult,
    FixtureCodeAdapter,
    FixtureMediaAdapter,
    FixturePageAdapter,
    FixtureSearchAdapter,
    HttpFetchError,
    LivePageAdapter,
    LiveSearchAdapter,
    MediaAnalysisResult,
    MediaUnavailableError,
    NonTextContentError,
    ProviderError,
    SandboxCodeAdapter,
    SandboxUnavailableError,
    SearchResult,
    ToolError,
    ToolInvoker,
    extract_readable_text,
    render_code_result,
    render_search_results,
    truncate_to_tokens,
)
from hiersearch.trace import Tracer


def results(n, prefix="r"):
    return [SearchResult(i + 1, f"{prefix}{i + 1}", f"https://x/{i + 1}", f"snippet {i + 1}")
            for i in range(n)]


class TestTruncateToTokens:
    def test_under_cap_untouched(self):
        assert truncate_to_tokens("abcd", 1) == ("abcd", False)

    def test_cut_at_token_boundary(self):
        text, truncated = truncate_to_tokens("x" * 9, 2)
        assert (text, truncated) == ("x" * 8, True)

    def test_multibyte_cut_never_breaks_characters(self):
        text, truncated = truncate_to_tokens("日" * 10, 2)  # 3 bytes each, cap 8 bytes
        assert truncated and text == "日日"


class TestFixtureSearch:
    def test_exact_query_lookup(self):
        a = FixtureSearchAdapter({"q": results(2)})
        assert [r.title for r in a.search("q")] == ["r1", "r2"]

    def test_unknown_query_returns_empty(self):
        assert FixtureSearchAdapter().search("nothing") == []

    def test_top_k_truncates_and_reranks(self):
        a = FixtureSearchAdapter({"q": results(10)})
        out = a.search("q", top_k=3)
        assert [r.rank for r in out] == [1, 2, 3]

    def test_rank_contiguity_from_jsonl(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text(json.dumps({"query": "q", "results": [
            {"title": "a"}, {"title": "b"}]}) + "\n")
        a = FixtureSearchAdapter.from_jsonl(str(p))
        assert [(r.rank, r.title) for r in a.search("q")] == [(1, "a"), (2, "b")]

    @pytest.mark.parametrize("query,top_k", [("", 5), ("  ", 5), ("q", 0), ("q", 51)])
    def test_argument_validation(self, query, top_k):
        with pytest.raises(ValueError):
            FixtureSearchAdapter().search(query, top_k=top_k)


class TestReadableText:
    def test_strips_scripts_and_tags(self):
        html = ("<html><script>var x=1;</script><style>p{}</style>"
                "<p>Hello <b>world</b> &amp; more</p><nav>menu</nav></html>")
        assert extract_readable_text(html) == "Hello world & more"

    def test_block_tags_become_newlines(self):
        html = "<div>first</div><div>second</div>"
        assert extract_readable_text(html) == "first\nsecond"


class TestFixturePage:
    def test_fetch_known_url(self):
        a = FixturePageAdapter({"https://x": (200, "body text")})
        assert a.fetch("https://x") == "body text"

    def test_unknown_url_raises_404(self):
        with pytest.raises(HttpFetchError) as err:
            FixturePageAdapter().fetch("https://missing")
        assert err.value.status == 404

    def test_configured_error_status(self):
        a = FixturePageAdapter({"https://x": (500, "")})
        with pytest.raises(HttpFetchError) as err:
            a.fetch("https://x")
        assert err.value.status == 500


class TestFixtureCode:
    def test_keyed_on_stripped_code(self):
        res = CodeExecutionResult("out", "", 0, 5)
        a = FixtureCodeAdapter({"print(1)": res})
        assert a.execute("  print(1)\n") is res

    def test_unknown_code_raises(self):
        with pytest.raises(SandboxUnavailableError):
            FixtureCodeAdapter().execute("print(2)")

    @pytest.mark.parametrize("timeout", [0, -1, 121])
    def test_timeout_bounds(self, timeout):
        with pytest.raises(ValueError):
            FixtureCodeAdapter({"c": CodeExecutionResult("", "", 0, 1)}).execute(
                "c", timeout_s=timeout)


class TestFixtureMedia:
    def test_keyed_on_path_and_question(self):
        a = FixtureMediaAdapter({("/f.png", "what?"): MediaAnalysisResult("a cat")})
        assert a.analyze("/f.png", "what?").answer == "a cat"
        with pytest.raises(MediaUnavailableError):
            a.analyze("/f.png", "other question")


class TestLiveSearch:
    def _adapter(self, handler, provider="bing", **kw):
        client = httpx.Client(transport=httpx.MockTransport(handler))
        return LiveSearchAdapter("https://api/search", provider, client=client,
                                 sleep=lambda s: None, **kw)

    def test_bing_response_parsing(self):
        payload = {"webPages": {"value": [
            {"name": "T1", "url": "https://a", "snippet": "s1"},
            {"name": "T2", "url": "https://b", "snippet": "s2"}]}}
        a = self._adapter(lambda r: httpx.Response(200, json=payload))
        out = a.search("q", top_k=2)
        assert [(r.rank, r.title, r.url) for r in out] == \
            [(1, "T1", "https://a"), (2, "T2", "https://b")]

    def test_serper_response_parsing(self):
        payload = {"organic": [{"title": "T", "link": "https://a", "snippet": "s"}]}
        a = self._adapter(lambda r: httpx.Response(200, json=payload), provider="serper")
        assert a.search("q")[0].url == "https://a"

    def test_unknown_provider_rejected(self):
        with pytest.raises(ValueError):
            LiveSearchAdapter("https://api", "altavista")

    def test_retry_then_success(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) == 1:
                return httpx.Response(500)
            return httpx.Response(200, json={"webPages": {"value": []}})

        assert self._adapter(handler).search("q") == []
        assert len(calls) == 2

    def test_client_error_raises_immediately(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(403)

        with pytest.raises(ProviderError):
            self._adapter(handler).search("q")
        assert len(calls) == 1

    def test_api_key_header(self, monkeypatch):
        monkeypatch.setenv("SEARCH_KEY", "k123")
        seen = {}

        def handler(request):
            seen.update(request.headers)
            return httpx.Response(200, json={"webPages": {"value": []}})

        self._adapter(handler, api_key_env="SEARCH_KEY").search("q")
        assert seen["ocp-apim-subscription-key"] == "k123"


class TestLivePage:
    def _adapter(self, handler):
        client = httpx.Client(transport=httpx.MockTransport(handler))
        return LivePageAdapter(client=client)

    def test_extracts_readable_text(self):
        html = "<html><body><p>Some article text</p><script>x()</script></body></html>"
        a = self._adapter(lambda r: httpx.Response(
            200, text=html, headers={"Content-Type": "text/html"}))
        assert a.fetch("https://x") == "Some article text"

    def test_non_text_content_rejected(self):
        a = self._adapter(lambda r: httpx.Response(
            200, content=b"\x89PNG", headers={"Content-Type": "image/png"}))
        with pytest.raises(NonTextContentError):
            a.fetch("https://x/img.png")

    def test_http_error_status(self):
        a = self._adapter(lambda r: httpx.Response(404))
        with pytest.raises(HttpFetchError):
            a.fetch("https://x")


class TestSandboxCodeAdapter:
    def _adapter(self, handler, **kw):
        client = httpx.Client(transport=httpx.MockTransport(handler))
        return SandboxCodeAdapter("http://sandbox:8700", client=client, **kw)

    def test_wire_mapping(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            seen["path"] = request.url.path
            return httpx.Response(200, json={
                "stdout": "4\n", "stderr": "", "exit_code": 0,
                "duration_ms": 12, "timed_out": False, "truncated": False})

        res = self._adapter(handler).execute("print(2+2)", timeout_s=30)
        assert seen["path"] == "/execute"
        assert seen["code"] == "print(2+2)" and seen["timeout_s"] == 30
        assert res == CodeExecutionResult("4\n", "", 0, 12)

    def test_files_sent_base64(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(200, json={"stdout": "", "stderr": "",
                                             "exit_code": 0, "duration_ms": 1})

        self._adapter(handler).execute("x = 1", files={"data.bin": b"\x00\x01"})
        assert seen["files"] == {"data.bin": "AAE="}

    def test_stdout_cap_forwarded(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(200, json={"stdout": "", "stderr": "",
                                             "exit_code": 0, "duration_ms": 1})

        self._adapter(handler, stdout_cap=1024).execute("x = 1")
        assert seen["stdout_cap"] == 1024

    def test_timeout_is_a_result_not_an_error(self):
        def handler(request):
            return httpx.Response(200, json={
                "stdout": "", "stderr": "timed out", "exit_code": 124,
                "duration_ms": 1000, "timed_out": True})

        res = self._adapter(handler).execute("while True: pass", timeout_s=1)
        assert res.timed_out and res.exit_status != 0

    def test_capacity_raises_sandbox_unavailable(self):
        a = self._adapter(lambda r: httpx.Response(503))
        with pytest.raises(SandboxUnavailableError, match="capacity"):
            a.execute("x = 1")

    def test_unreachable_raises_sandbox_unavailable(self):
        def handler(request):
            raise httpx.ConnectError("refused")

        with pytest.raises(SandboxUnavailableError, match="unreachable"):
            self._adapter(handler).execute("x = 1")

    def test_rejected_request_raises_tool_error(self):
        a = self._adapter(lambda r: httpx.Response(400, text="bad code"))
        with pytest.raises(ToolError, match="400"):
            a.execute("x = 1")


class TestRendering:
    def test_search_results_format(self):
        out = render_search_results(results(2))
        assert out.startswith("Document 1: r1\nURL: https://x/1\nSnippet: snippet 1")
        assert "\n\nDocument 2: r2\n" in out

    def test_search_results_empty(self):
        assert render_search_results([]) == "No results found."

    def test_snippet_cap_applied(self):
        r = [SearchResult(1, "t", "u", "x" * 600)]
        out = render_search_results(r, snippet_cap=100)
        assert out.endswith("x" * 100) and "x" * 101 not in out

    def test_code_result_sections(self):
        res = CodeExecutionResult("out line", "boom", 1, 33)
        text = render_code_result(res)
        assert text.splitlines() == ["Execution result (exit 1, 33 ms):",
                                     "out line", "--- stderr ---", "boom"]

    def test_code_result_no_output(self):
        assert "(no output)" in render_code_result(CodeExecutionResult("", "", 0, 1))

    def test_code_result_flags(self):
        res = CodeExecutionResult("x", "", 0, 1, truncated=True, timed_out=True)
        text = render_code_result(res)
        assert "[execution timed out]" in text and "[output truncated]" in text


class TestToolInvoker:
    def _invoker(self, **kw):
        kw.setdefault("search", FixtureSearchAdapter({"q": results(2)}))
        kw.setdefault("code", FixtureCodeAdapter(
            {"print(1)": CodeExecutionResult("1\n", "", 0, 5)}))
        return ToolInvoker(**kw)

    def test_search_renders_documents(self):
        out = self._invoker().search("q")
        assert out.ok and out.text.startswith("Document 1: r1")

    def test_cache_hit_skips_adapter(self):
        adapter = FixtureSearchAdapter({"q": results(1)})
        inv = self._invoker(search=adapter)
        first = inv.search("q")
        second = inv.search("  q  ")  # whitespace-normalized key
        assert not first.cached and second.cached
        assert second.text == first.text and second.duration_ms == 0
        assert adapter.calls == 1

    def test_different_top_k_not_cached_together(self):
        adapter = FixtureSearchAdapter({"q": results(5)})
        inv = self._invoker(search=adapter)
        inv.search("q", top_k=2)
        inv.search("q", top_k=3)
        assert adapter.calls == 2

    def test_code_cache_key_is_stripped(self):
        adapter = FixtureCodeAdapter({"print(1)": CodeExecutionResult("1\n", "", 0, 5)})
        inv = self._invoker(code=adapter)
        inv.code("print(1)")
        assert inv.code("\nprint(1)\n").cached
        assert adapter.calls == 1

    def test_failure_becomes_not_ok_result(self):
        inv = self._invoker()
        out = inv.code("unknown code")
        assert not out.ok and out.text.startswith("Tool call failed:")

    def test_failing_exit_status_is_not_ok(self):
        adapter = FixtureCodeAdapter({"bad": CodeExecutionResult("", "trace", 1, 5)})
        out = self._invoker(code=adapter).code("bad")
        assert not out.ok and "exit 1" in out.text

    def test_missing_adapter_raises(self):
        inv = ToolInvoker(search=FixtureSearchAdapter())
        with pytest.raises(ToolError, match="no adapter configured"):
            inv.code("print(1)")

    def test_trace_pair_per_invocation(self):
        tracer = Tracer("s")
        inv = self._invoker(tracer=tracer)
        inv.current_expert = "search-agent"
        inv.search("q")
        inv.search("q")  # cached
        kinds = [(e.kind, e.payload["cached"]) for e in tracer.events]
        assert kinds == [("tool_call", False), ("tool_result", False),
                         ("tool_call", True), ("tool_result", True)]
        call = tracer.events[0].payload
        assert call["op"] == "search" and call["expert"] == "search-agent"
        assert call["query"] == "q" and call["top_k"] == 10

    def test_code_trace_includes_code_head(self):
        tracer = Tracer("s")
        inv = self._invoker(tracer=tracer)
        inv.code("print(1)")
        assert tracer.events[0].payload["code"] == "print(1)"

    def test_duration_uses_injected_clock(self):
        ticks = iter([0.0, 0.25])
        inv = self._invoker(clock=lambda: next(ticks))
        out = inv.search("q")
        assert out.duration_ms == 250

    def test_visit_truncates_to_page_token_cap(self):
        page = FixturePageAdapter({"https://x": (200, "word " * 4000)})
        inv = ToolInvoker(page=page, page_token_cap=100)
        out = inv.visit("https://x")
        assert out.ok and out.text.endswith("[page truncated]")

    def test_media_roundtrip(self):
        media = FixtureMediaAdapter({("/f.png", "what?"): MediaAnalysisResult("a dog")})
        inv = ToolInvoker(media=media)
        assert inv.media("/f.png", "what?").text == "a dog"
