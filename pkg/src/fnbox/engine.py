"""The streaming core: fan out candidates, select by execution agreement,
grow the toolbox, and periodically trim it (re-solving affected examples).

The stream is strictly sequential across examples because every step depends
on the toolbox state; inside one example, candidate execution parallelizes
across the sandbox pool and selection is the joining barrier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from . import reporting
from .execution import WorkerPool, answer_group_key, execute_candidates, match_answer
from .gateway import DemoBank, RESOLVE_MODE_ORDER, generate_candidates
from .model import (
    CandidateResponse,
    Example,
    ExecutionOutcome,
    Method,
    Mode,
    RunConfig,
    RunRecord,
    Toolbox,
    TrimEvent,
)
from .parsing import extract_program, find_used_functions, split_function_solution

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Agreement-based selection
# ---------------------------------------------------------------------------

def select_best(candidates: list[CandidateResponse]) -> CandidateResponse | None:
    """Pick the winning candidate, or None when nothing executed cleanly.

    Rule order: drop failed executions; keep the answer value(s) shared by the
    most candidates; among those prefer the lowest operation count (programs
    without a parseable count rank last); break remaining ties by the earliest
    position in the flattened prediction list.
    """
    ok = [c for c in candidates if c.outcome is not None and c.outcome.ok]
    if not ok:
        return None
    groups: dict = {}
    for cand in ok:
        key = answer_group_key(cand.outcome.value, cand.outcome.value_kind)
        groups.setdefault(key, []).append(cand)
    top = max(len(members) for members in groups.values())
    pool = [c for members in groups.values() if len(members) == top for c in members]
    ops = lambda c: c.op_count if c.op_count is not None else math.inf
    return min(pool, key=lambda c: (ops(c), c.global_index))


# ---------------------------------------------------------------------------
# Trimming
# ---------------------------------------------------------------------------

def trim_threshold(n: int, coefficient: float) -> float:
    """Usage threshold after n processed examples: coefficient * log10(n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if coefficient <= 0:
        raise ValueError("coefficient must be > 0")
    return coefficient * math.log10(n)


@dataclass
class EngineState:
    toolbox: Toolbox = field(default_factory=Toolbox)
    records: list[RunRecord] = field(default_factory=list)
    step: int = 0  # examples processed so far
    resolve_queue: list[str] = field(default_factory=list)
    examples_by_id: dict[str, Example] = field(default_factory=dict)
    instance_ledger: set[tuple[str, str]] = field(default_factory=set)


def trim_toolbox(state: EngineState, config: RunConfig) -> list[str]:
    """Remove functions used fewer than the current threshold allows.

    Every record whose solution used a removed function is queued for
    re-solution; the caller drains the queue before the stream advances.
    """
    threshold = trim_threshold(state.step, config.trim_coefficient)
    removed = [fn.name for fn in state.toolbox if fn.usage_count < threshold]
    state.toolbox.remove_many(removed)
    state.toolbox.trim_log.append(TrimEvent(step=state.step, threshold=threshold,
                                            removed=list(removed)))
    if removed:
        removed_set = set(removed)
        for record in state.records:
            if record.used_functions & removed_set and record.example_id not in state.resolve_queue:
                state.resolve_queue.append(record.example_id)
    return removed


# ---------------------------------------------------------------------------
# Candidate preparation
# ---------------------------------------------------------------------------

def prepare_candidates(candidates: list[CandidateResponse]) -> None:
    """Fill each candidate's functions/solution from its raw text, in place."""
    for cand in candidates:
        code = extract_program(cand.raw_text)
        split = split_function_solution(code, cand.mode)
        cand.functions = split.functions
        cand.solution = split.solution
        if split.parse_error:
            cand.outcome = ExecutionOutcome(status="parse-error",
                                            stderr="response code does not parse")


def _winner_used_functions(winner: CandidateResponse, toolbox: Toolbox) -> set[str]:
    # Direct calls from the solution body plus from newly induced bodies.
    names = set(toolbox.names())
    used = find_used_functions(winner.solution, names)
    for fn in winner.functions:
        used |= find_used_functions(fn.source, names)
    return used


@dataclass
class StepDeps:
    """Collaborators threaded through the stream loop."""

    backend: object
    pool: WorkerPool
    demo_bank: DemoBank
    template_dir: str | None = None


# ---------------------------------------------------------------------------
# Stream loop
# ---------------------------------------------------------------------------

def step_example(state: EngineState, example: Example, config: RunConfig,
                 deps: StepDeps) -> RunRecord:
    """Process the next example in the stream and append its record."""
    candidates = generate_candidates(deps.backend, config, state.toolbox, example,
                                     deps.demo_bank, template_dir=deps.template_dir)
    prepare_candidates(candidates)
    execute_candidates(candidates, state.toolbox, example.env, deps.pool,
                       config.exec_timeout_ms, config.answer_var)
    winner = select_best(candidates)

    added: list[str] = []
    used: set[str] = set()
    correct = False
    if winner is not None:
        correct = match_answer(winner.outcome.value, example.gold)
        if config.method == Method.TROVE:
            for fn in winner.functions:
                fn.created_at_step = state.step + 1
                fn.origin_example_id = example.id
                is_new = fn.name not in state.toolbox
                state.toolbox.add(fn)
                if is_new:
                    added.append(fn.name)
            used = _winner_used_functions(winner, state.toolbox)
            state.toolbox.increment_usage(used)
        elif config.method == Method.INSTANCE:
            for fn in winner.functions:
                state.instance_ledger.add((fn.name, fn.source))

    record = RunRecord(example_id=example.id, chosen=winner, correct=correct,
                       used_functions=used, added_functions=added)
    state.records.append(record)
    state.examples_by_id[example.id] = example
    state.step += 1

    if (config.method == Method.TROVE and config.trim_enabled
            and state.step % config.trim_interval == 0):
        trim_toolbox(state, config)
        while state.resolve_queue:
            ex_id = state.resolve_queue.pop(0)
            resolve_example(state, state.examples_by_id[ex_id], config, deps)
    return record


def resolve_example(state: EngineState, example: Example, config: RunConfig,
                    deps: StepDeps) -> RunRecord:
    """Re-solve one example after a trim, under IMPORT and SKIP modes only.

    The old record is replaced in place (marked re_solved); usage counts for
    the new solution are added, while the retired solution's counts stay;
    history is immutable. The record keeps its original added_functions since
    the toolbox insertion at that step did happen.
    """
    resolve_modes = tuple(m for m in config.trove_modes() if m != Mode.CREATE)
    candidates = generate_candidates(deps.backend, config, state.toolbox, example,
                                     deps.demo_bank, modes=resolve_modes,
                                     template_dir=deps.template_dir)
    prepare_candidates(candidates)
    execute_candidates(candidates, state.toolbox, example.env, deps.pool,
                       config.exec_timeout_ms, config.answer_var)
    winner = select_best(candidates)

    used: set[str] = set()
    correct = False
    if winner is not None:
        correct = match_answer(winner.outcome.value, example.gold)
        used = _winner_used_functions(winner, state.toolbox)
        state.toolbox.increment_usage(used)

    index = next(i for i, r in enumerate(state.records) if r.example_id == example.id)
    record = RunRecord(example_id=example.id, chosen=winner, correct=correct,
                       used_functions=used,
                       added_functions=state.records[index].added_functions,
                       re_solved=True)
    state.records[index] = record
    return record


@dataclass
class RunResult:
    records: list[RunRecord]
    toolbox: Toolbox
    metrics: "reporting.RunMetrics"
    trajectory: list[dict]
    instance_ledger: set[tuple[str, str]]


def run_stream(examples: list[Example], config: RunConfig, backend,
               pool: WorkerPool, demo_bank: DemoBank | None = None,
               template_dir: str | None = None) -> RunResult:
    """Fold the stream loop over an already-ordered dataset, from an empty
    toolbox, and return records, the final toolbox, metrics, and the per-step
    toolbox trajectory."""
    deps = StepDeps(backend=backend, pool=pool,
                    demo_bank=demo_bank or DemoBank.default(),
                    template_dir=template_dir)
    state = EngineState()
    trajectory: list[dict] = []
    for example in examples:
        example.stream_index = state.step
        step_example(state, example, config, deps)
        trajectory.append({
            "step": state.step,
            "size": len(state.toolbox),
            "functions": {fn.name: fn.usage_count for fn in state.toolbox},
        })
    metrics = reporting.compute_metrics(state.records, state.toolbox, config.method,
                                        instance_ledger=state.instance_ledger)
    return RunResult(records=state.records, toolbox=state.toolbox, metrics=metrics,
                     trajectory=trajectory, instance_ledger=state.instance_ledger)


# ---------------------------------------------------------------------------
# Run output serialization
# ---------------------------------------------------------------------------

def record_to_json_dict(record: RunRecord) -> dict:
    chosen = record.chosen
    return {
        "example_id": record.example_id,
        "mode_of_winner": chosen.mode.value if chosen else None,
        "solution": chosen.solution if chosen else "",
        "answer": chosen.outcome.value if chosen else None,
        "correct": record.correct,
        "op_count": chosen.op_count if chosen else None,
        "used_functions": sorted(record.used_functions),
        "added_functions": list(record.added_functions),
        "re_solved": record.re_solved,
    }
