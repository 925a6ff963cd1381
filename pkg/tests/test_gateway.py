"""Prompt assembly, scripted mock, HTTP backend, candidate generation."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from fnbox.gateway import (
    Decoding,
    DemoBank,
    HttpBackend,
    MockKeyError,
    PromptError,
    PromptCapture,
    SampleContext,
    ScriptedMockBackend,
    TransportError,
    build_prompt,
    generate_candidates,
    sample,
)
from fnbox.model import Method, Mode, RunConfig, Toolbox, parse_tool_function

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def config():
    return RunConfig(method=Method.TROVE, k_samples=2, demo_count=2, num_runs=1)


@pytest.fixture
def demo_bank():
    return DemoBank.default()


def toolbox_with(*names):
    box = Toolbox()
    for name in names:
        box.add(parse_tool_function(
            f'def {name}(a, b):\n    """Helper {name}."""\n    return a + b'))
    return box


class TestBuildPrompt:
    def test_deterministic(self, config, demo_bank, math_example):
        box = toolbox_with("f_a")
        first = build_prompt(Mode.IMPORT, config, box, math_example, demo_bank).render()
        second = build_prompt(Mode.IMPORT, config, box, math_example, demo_bank).render()
        assert first == second

    def test_skip_prompt_has_no_toolbox_section(self, config, demo_bank, math_example):
        box = toolbox_with("f_a", "f_b", "f_c")
        spec = build_prompt(Mode.SKIP, config, box, math_example, demo_bank)
        assert spec.toolbox_section is None
        assert "## Toolbox" not in spec.render()
        assert "f_a" not in spec.render()

    def test_import_empty_toolbox_renders_header_no_entries(self, config, demo_bank,
                                                            math_example):
        spec = build_prompt(Mode.IMPORT, config, Toolbox(), math_example, demo_bank)
        assert spec.toolbox_section == ""
        assert "## Toolbox" in spec.render()

    def test_import_lists_functions_in_insertion_order(self, config, demo_bank,
                                                       math_example):
        box = toolbox_with("f_a", "f_b")
        rendered = build_prompt(Mode.IMPORT, config, box, math_example, demo_bank).render()
        assert rendered.index("def f_a") < rendered.index("def f_b")

    def test_import_prompt_matches_frozen_snapshot(self, config, demo_bank, math_example):
        box = toolbox_with("f_a", "f_b")
        rendered = build_prompt(Mode.IMPORT, config, box, math_example, demo_bank).render()
        snapshot = (FIXTURES / "prompt_import_snapshot.txt").read_text(encoding="utf-8")
        assert rendered == snapshot

    def test_monotonicity_toolbox_changes_import_create_only(self, config, demo_bank,
                                                             math_example):
        before = {
            mode: build_prompt(mode, config, toolbox_with("f_a"), math_example,
                               demo_bank).render()
            for mode in (Mode.IMPORT, Mode.CREATE, Mode.SKIP, Mode.PRIMITIVE)
        }
        after = {
            mode: build_prompt(mode, config, toolbox_with("f_a", "f_new"), math_example,
                               demo_bank).render()
            for mode in (Mode.IMPORT, Mode.CREATE, Mode.SKIP, Mode.PRIMITIVE)
        }
        assert before[Mode.IMPORT] != after[Mode.IMPORT]
        assert before[Mode.CREATE] != after[Mode.CREATE]
        assert before[Mode.SKIP] == after[Mode.SKIP]
        assert before[Mode.PRIMITIVE] == after[Mode.PRIMITIVE]

    def test_demo_count_respected(self, config, demo_bank, math_example):
        spec = build_prompt(Mode.SKIP, config, None, math_example, demo_bank)
        assert len(spec.demos) == config.demo_count

    def test_insufficient_demos_error(self, config, math_example):
        starved = DemoBank({"math": []})
        with pytest.raises(PromptError, match="demo"):
            build_prompt(Mode.SKIP, config, None, math_example, starved)

    def test_toolbox_required_for_import(self, config, demo_bank, math_example):
        with pytest.raises(PromptError, match="toolbox"):
            build_prompt(Mode.IMPORT, config, None, math_example, demo_bank)

    def test_create_instruction_mentions_function_creation(self, config, demo_bank,
                                                           math_example):
        spec = build_prompt(Mode.CREATE, config, Toolbox(), math_example, demo_bank)
        assert "create" in spec.instruction.lower()


class TestScriptedMock:
    def test_table_lookup_in_order(self):
        backend = ScriptedMockBackend({"e1|SKIP|0": "resp0", "e1|SKIP|1": "resp1"})
        texts = sample(backend, "prompt", 2, Decoding(), SampleContext("e1", Mode.SKIP))
        assert texts == ["resp0", "resp1"]

    def test_missing_key_names_it(self):
        backend = ScriptedMockBackend({"e1|SKIP|0": "resp0"})
        with pytest.raises(MockKeyError, match=r"e1\|SKIP\|1"):
            sample(backend, "prompt", 2, Decoding(), SampleContext("e1", Mode.SKIP))


class TestGenerateCandidates:
    def _mock_for(self, example_id, k):
        script = {}
        for mode in ("IMPORT", "CREATE", "SKIP", "PRIMITIVE", "INSTANCE"):
            for i in range(k):
                script[f"{example_id}|{mode}|{i}"] = f"```python\nans = {i}\n```"
        return ScriptedMockBackend(script)

    def test_k1_gives_three_modes_in_order(self, demo_bank, math_example):
        config = RunConfig(method=Method.TROVE, k_samples=1, num_runs=1)
        cands = generate_candidates(self._mock_for("m1", 1), config, Toolbox(),
                                    math_example, demo_bank)
        assert [c.mode for c in cands] == [Mode.IMPORT, Mode.CREATE, Mode.SKIP]
        assert [c.global_index for c in cands] == [0, 1, 2]

    def test_k5_gives_fifteen(self, demo_bank, math_example):
        config = RunConfig(method=Method.TROVE, k_samples=5, num_runs=1)
        cands = generate_candidates(self._mock_for("m1", 5), config, Toolbox(),
                                    math_example, demo_bank)
        assert len(cands) == 15
        assert [c.mode for c in cands[:5]] == [Mode.IMPORT] * 5
        assert [c.mode for c in cands[5:10]] == [Mode.CREATE] * 5
        assert [c.mode for c in cands[10:]] == [Mode.SKIP] * 5
        assert [c.global_index for c in cands] == list(range(15))

    def test_primitive_method_gives_k_primitive_candidates(self, demo_bank, math_example):
        config = RunConfig(method=Method.PRIMITIVE, k_samples=5, num_runs=1)
        cands = generate_candidates(self._mock_for("m1", 5), config, Toolbox(),
                                    math_example, demo_bank)
        assert len(cands) == 5
        assert all(c.mode == Mode.PRIMITIVE for c in cands)

    def test_prompt_capture_wrapper(self, demo_bank, math_example):
        config = RunConfig(method=Method.INSTANCE, k_samples=1, num_runs=1)
        capture = PromptCapture(self._mock_for("m1", 1))
        generate_candidates(capture, config, Toolbox(), math_example, demo_bank)
        assert len(capture.captured) == 1
        assert capture.captured[0][1] == "INSTANCE"


class _FakeChatHandler(BaseHTTPRequestHandler):
    fail_first = 0
    requests_seen = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        cls = type(self)
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        cls.requests_seen.append(body)
        if cls.fail_first > 0:
            cls.fail_first -= 1
            self.send_response(500)
            self.end_headers()
            return
        n = body.get("n", 1)
        payload = json.dumps({
            "choices": [
                {"index": i, "message": {"content": f"reply {i} to {body['model']}"}}
                for i in range(n)
            ]
        }).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture
def fake_server():
    _FakeChatHandler.fail_first = 0
    _FakeChatHandler.requests_seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _FakeChatHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestHttpBackend:
    def test_five_sampled_in_order(self, fake_server):
        backend = HttpBackend(fake_server, model="test-model")
        texts = sample(backend, "hello", 5, Decoding(temperature=0.6, top_p=0.95),
                       SampleContext("e1", Mode.SKIP))
        assert texts == [f"reply {i} to test-model" for i in range(5)]
        request = _FakeChatHandler.requests_seen[-1]
        assert request["n"] == 5
        assert request["temperature"] == 0.6
        assert request["top_p"] == 0.95
        assert request["max_tokens"] == 512

    def test_retries_then_succeeds(self, fake_server):
        _FakeChatHandler.fail_first = 2
        backend = HttpBackend(fake_server, model="test-model")
        texts = sample(backend, "hello", 1, Decoding(), SampleContext("e1", Mode.SKIP))
        assert texts == ["reply 0 to test-model"]

    def test_transport_error_after_retries(self, fake_server):
        _FakeChatHandler.fail_first = 99
        backend = HttpBackend(fake_server, model="test-model", retries=3)
        with pytest.raises(TransportError):
            sample(backend, "hello", 1, Decoding(), SampleContext("e1", Mode.SKIP))


class TestModeOrderConfig:
    def test_custom_mode_order_drives_global_index(self, demo_bank, math_example):
        config = RunConfig(method=Method.TROVE, k_samples=1, num_runs=1,
                           mode_order="skip,import,create")
        script = {f"m1|{m}|0": "```python\nans = 1\n```"
                  for m in ("IMPORT", "CREATE", "SKIP")}
        cands = generate_candidates(ScriptedMockBackend(script), config, Toolbox(),
                                    math_example, demo_bank)
        assert [c.mode for c in cands] == [Mode.SKIP, Mode.IMPORT, Mode.CREATE]

    def test_invalid_mode_order_rejected(self):
        with pytest.raises(ValueError, match="mode_order"):
            RunConfig(num_runs=1, mode_order="import,create")
