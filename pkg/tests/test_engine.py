"""Engine core: selection, trimming, re-solving, stream determinism, baselines."""

import json
import math
import random
from pathlib import Path

import pytest

from fnbox import datasets, engine
from fnbox.engine import (
    EngineState,
    select_best,
    step_example,
    trim_threshold,
    trim_toolbox,
)
from fnbox.gateway import DemoBank, PromptCapture, ScriptedMockBackend
from fnbox.model import (
    Method,
    Mode,
    RunConfig,
    RunRecord,
    Toolbox,
    parse_tool_function,
)

from conftest import make_candidate
from oracles import brute_force_select

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_run(name, *, trim_enabled=True, limit=None, method=None, backend=None,
                pool=None, config_overrides=None):
    base = FIXTURES / name
    examples = datasets.load_dataset(base / "dataset.json", "math-json", limit=limit)
    raw = json.loads((base / "config.json").read_text())
    raw["trim_enabled"] = trim_enabled
    if method:
        raw["method"] = method
    raw.update(config_overrides or {})
    config = RunConfig.from_dict(raw)
    backend = backend or ScriptedMockBackend.from_file(base / "mock.json")
    ordered = datasets.apply_ordering(examples, datasets.original_ordering(examples))
    return engine.run_stream(ordered, config, backend, pool, DemoBank.default())


class TestSelectBest:
    def test_plurality_then_min_ops(self):
        cands = [make_candidate(0, answer="A", ops=5),
                 make_candidate(1, answer="A", ops=3),
                 make_candidate(2, answer="B", ops=7)]
        assert select_best(cands).global_index == 1

    def test_frequency_tie_falls_to_ops(self):
        cands = [make_candidate(0, answer="A", ops=5),
                 make_candidate(1, answer="B", ops=3)]
        assert select_best(cands).global_index == 1

    def test_full_tie_takes_first_index(self):
        cands = [make_candidate(0, answer="A", ops=4),
                 make_candidate(2, answer="A", ops=4)]
        assert select_best(cands).global_index == 0

    def test_all_failed_is_unsolved(self):
        cands = [make_candidate(i, ok=False) for i in range(4)]
        assert select_best(cands) is None

    def test_missing_ops_ranks_last(self):
        cands = [make_candidate(0, answer="A", ops=None),
                 make_candidate(1, answer="A", ops=9)]
        assert select_best(cands).global_index == 1

    def test_numeric_answers_group_after_rounding(self):
        cands = [make_candidate(0, answer=5.0, ops=4),
                 make_candidate(1, answer=5, ops=4),
                 make_candidate(2, answer=6, ops=1)]
        assert select_best(cands).global_index == 0

    def test_oracle_equivalence_1000_random_sets(self):
        rng = random.Random(2024)
        for _ in range(1000):
            n = rng.randint(1, 15)
            cands, plain = [], []
            for i in range(n):
                ok = rng.random() < 0.7
                answer = rng.choice("ABC")
                ops = rng.choice([None, 1, 2, 3, 5, 8])
                cands.append(make_candidate(i, ok=ok, answer=answer,
                                            answer_kind="text", ops=ops))
                plain.append({"index": i, "ok": ok, "answer": answer, "ops": ops})
            expected = brute_force_select(plain)
            got = select_best(cands)
            assert (got.global_index if got else None) == expected


class TestTrimThreshold:
    def test_formula_values(self):
        assert trim_threshold(1, 0.5) == 0.0
        assert abs(trim_threshold(200, 0.5) - 1.1505149978319906) < 1e-9
        assert abs(trim_threshold(10000, 0.5) - 2.0) < 1e-9

    def test_rejects_n_below_one(self):
        with pytest.raises(ValueError):
            trim_threshold(0, 0.5)

    def test_matches_log_identity(self):
        for n in (3, 17, 240, 999):
            assert trim_threshold(n, 2.0) == pytest.approx(2.0 * math.log10(n))


def _toolbox_from_usages(usages):
    box = Toolbox()
    for i, usage in enumerate(usages):
        fn = parse_tool_function(f"def fn_{i}(a):\n    return a")
        box.add(fn)
        box.get(fn.name).usage_count = usage
    return box


class TestTrimToolbox:
    def test_removes_below_threshold(self):
        state = EngineState(toolbox=_toolbox_from_usages([12, 1, 0]), step=200)
        config = RunConfig(num_runs=1)
        removed = trim_toolbox(state, config)
        assert removed == ["fn_1", "fn_2"]
        assert state.toolbox.names() == ["fn_0"]

    def test_no_removal_logs_event(self):
        state = EngineState(toolbox=_toolbox_from_usages([5, 2]), step=200)
        removed = trim_toolbox(state, RunConfig(num_runs=1))
        assert removed == []
        assert len(state.toolbox.trim_log) == 1

    def test_affected_records_queue_for_resolution(self):
        state = EngineState(toolbox=_toolbox_from_usages([9, 1]), step=200)
        state.records.append(RunRecord(example_id="e7", chosen=None, correct=False,
                                       used_functions={"fn_1"}))
        state.records.append(RunRecord(example_id="e8", chosen=None, correct=False,
                                       used_functions={"fn_0"}))
        trim_toolbox(state, RunConfig(num_runs=1))
        assert state.resolve_queue == ["e7"]

    def test_soundness_on_randomized_toolboxes(self):
        rng = random.Random(99)
        for _ in range(200):
            usages = [rng.randint(0, 6) for _ in range(rng.randint(0, 12))]
            step = rng.randint(1, 5000)
            coeff = rng.choice([0.5, 1.0, 2.0])
            state = EngineState(toolbox=_toolbox_from_usages(usages), step=step)
            before = {fn.name: fn.usage_count for fn in state.toolbox}
            removed = trim_toolbox(state, RunConfig(trim_coefficient=coeff, num_runs=1))
            threshold = trim_threshold(step, coeff)
            for fn in state.toolbox:
                assert fn.usage_count >= threshold
            for name in removed:
                assert before[name] < threshold


class TestGoldenStream:
    def test_records_match_hand_trace(self, pool):
        result = fixture_run("golden_stream", pool=pool)
        rows = [engine.record_to_json_dict(r) for r in result.records]
        winners = [(r["example_id"], r["mode_of_winner"], r["answer"], r["correct"])
                   for r in rows]
        assert winners == [
            ("e01", "CREATE", 5, True),
            ("e02", "IMPORT", 6, True),
            ("e03", "SKIP", 385, False),
            ("e04", "IMPORT", 17, True),
            ("e05", "SKIP", 5.0, True),
            ("e06", "SKIP", 12, True),
            ("e07", "SKIP", 8, False),
            ("e08", "IMPORT", 14, True),
            ("e09", "SKIP", 27, True),
            ("e10", None, None, False),
        ]
        assert [r["re_solved"] for r in rows] == [
            False, False, True, False, False, False, True, False, False, False]

    def test_trim_events_and_final_toolbox(self, pool):
        result = fixture_run("golden_stream", pool=pool)
        box = result.toolbox
        assert box.names() == ["add_nums"]
        assert box.get("add_nums").usage_count == 4
        events = [(e.step, e.removed) for e in box.trim_log]
        assert events == [(3, ["mult_nums"]), (6, []), (9, ["sum_pair"])]

    def test_six_example_prefix_matches_hand_computed_trajectory(self, pool):
        result = fixture_run("no_trim", pool=pool, limit=6)
        sizes = [row["size"] for row in result.trajectory]
        assert sizes == [1, 1, 2, 2, 3, 2]  # step-6 trim drops the two single-use helpers

    def test_resolution_uses_two_modes_times_k(self, pool):
        # e03's re-solve consumes IMPORT and SKIP samples only: its record's
        # winner must come from one of those modes with K=2 candidates each.
        result = fixture_run("golden_stream", pool=pool)
        e03 = next(r for r in result.records if r.example_id == "e03")
        assert e03.re_solved
        assert e03.chosen.mode in (Mode.IMPORT, Mode.SKIP)
        assert e03.chosen.global_index < 4

    def test_stream_determinism(self, pool):
        first = fixture_run("golden_stream", pool=pool)
        second = fixture_run("golden_stream", pool=pool)
        as_rows = lambda res: [engine.record_to_json_dict(r) for r in res.records]
        assert as_rows(first) == as_rows(second)
        assert first.trajectory == second.trajectory
        assert first.toolbox.to_json_dict() == second.toolbox.to_json_dict()

    def test_empty_dataset(self, pool):
        config = RunConfig(num_runs=1)
        result = engine.run_stream([], config, ScriptedMockBackend({}), pool,
                                   DemoBank.default())
        assert result.records == []
        assert len(result.toolbox) == 0
        assert result.metrics.acc == 0.0


class TestUsageAccounting:
    def test_conservation_without_trimming(self, pool):
        result = fixture_run("no_trim", pool=pool, trim_enabled=False)
        total_usage = sum(fn.usage_count for fn in result.toolbox)
        total_used = sum(len(r.used_functions) for r in result.records)
        assert total_usage == total_used

    def test_losing_candidates_never_count(self, pool):
        # In the golden stream, e08's losing candidate calls sum_pair; usage
        # must reflect only adopted solutions.
        result = fixture_run("golden_stream", pool=pool)
        e08 = next(r for r in result.records if r.example_id == "e08")
        assert e08.used_functions == {"add_nums"}


def _baseline_mock(mode, examples, k):
    script = {}
    for i, ex in enumerate(examples):
        for s in range(k):
            if mode == "PRIMITIVE":
                code = f"ans = {i} + {s}"
            else:
                code = (f"def helper_{i}_{s}(x):\n    return x + {i}\n"
                        f"ans = helper_{i}_{s}({s})")
            script[f"{ex['id']}|{mode}|{s}"] = f"```python\n{code}\n```"
    return ScriptedMockBackend(script)


class TestBaselines:
    def test_primitive_toolbox_stays_empty(self, pool):
        dataset = json.loads((FIXTURES / "golden_stream" / "dataset.json").read_text())
        backend = _baseline_mock("PRIMITIVE", dataset, 2)
        result = fixture_run("golden_stream", pool=pool, method="primitive",
                             backend=backend)
        assert all(row["size"] == 0 for row in result.trajectory)
        assert result.metrics.lib_size is None

    def test_instance_never_injects_functions_into_prompts(self, pool):
        dataset = json.loads((FIXTURES / "golden_stream" / "dataset.json").read_text())
        backend = PromptCapture(_baseline_mock("INSTANCE", dataset, 2))
        result = fixture_run("golden_stream", pool=pool, method="instance",
                             backend=backend)
        assert len(result.instance_ledger) > 0
        induced_names = {name for name, _ in result.instance_ledger}
        for _, _, prompt in backend.captured:
            for name in induced_names:
                assert name not in prompt
        assert "## Toolbox" not in backend.captured[-1][2]

    def test_instance_ledger_counts_distinct_functions(self, pool):
        dataset = json.loads((FIXTURES / "golden_stream" / "dataset.json").read_text())
        backend = _baseline_mock("INSTANCE", dataset, 2)
        result = fixture_run("golden_stream", pool=pool, method="instance",
                             backend=backend)
        # each example's winner induces one distinct helper
        assert result.metrics.lib_size == len(dataset)
        assert len(result.toolbox) == 0

    def test_instance_records_have_no_toolbox_usage(self, pool):
        dataset = json.loads((FIXTURES / "golden_stream" / "dataset.json").read_text())
        backend = _baseline_mock("INSTANCE", dataset, 2)
        result = fixture_run("golden_stream", pool=pool, method="instance",
                             backend=backend)
        assert all(r.used_functions == set() for r in result.records)


class TestNoTrimAblation:
    def test_trim_shrinks_library_without_hurting_accuracy(self, pool):
        trimmed = fixture_run("no_trim", pool=pool, trim_enabled=True)
        untrimmed = fixture_run("no_trim", pool=pool, trim_enabled=False)
        assert untrimmed.metrics.lib_size == 10
        assert trimmed.metrics.lib_size == 2
        reduction = 1 - trimmed.metrics.lib_size / untrimmed.metrics.lib_size
        assert reduction >= 0.7
        assert trimmed.metrics.acc == untrimmed.metrics.acc == 1.0

    def test_no_trim_growth_is_monotone(self, pool):
        result = fixture_run("no_trim", pool=pool, trim_enabled=False)
        sizes = [row["size"] for row in result.trajectory]
        assert sizes == sorted(sizes)
        assert not result.toolbox.trim_log

    def test_growth_trace_final_value_equals_lib_size(self, pool):
        from fnbox.reporting import growth_trace
        for trim_enabled in (True, False):
            result = fixture_run("no_trim", pool=pool, trim_enabled=trim_enabled)
            trace = growth_trace(result.records, result.toolbox.trim_log)
            assert trace[-1][1] == result.metrics.lib_size
            assert [row["size"] for row in result.trajectory] == \
                [size for _, size in trace]
