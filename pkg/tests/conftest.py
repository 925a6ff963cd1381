import json
from pathlib import Path

import pytest

from fnbox.execution import WorkerPool
from fnbox.model import (
    CandidateResponse,
    EnvironmentRef,
    Example,
    ExecutionOutcome,
    GoldAnswer,
    Mode,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def pool():
    with WorkerPool(size=2) as p:
        yield p


@pytest.fixture(scope="session")
def visual_pool():
    fixture = FIXTURES / "visual_stub.json"
    with WorkerPool(size=1, visual_fixture=str(fixture)) as p:
        yield p


@pytest.fixture
def math_example():
    return Example(
        id="m1",
        query="What is 2 + 3?",
        env=EnvironmentRef(kind="none"),
        gold=[GoldAnswer("number", 5)],
        dataset="mini-math",
    )


def make_candidate(index: int, *, mode: Mode = Mode.SKIP, ok: bool = True,
                   answer=None, answer_kind: str | None = None,
                   ops: int | None = 1, solution: str = "ans = 0") -> CandidateResponse:
    """Build an already-executed candidate for selection tests."""
    cand = CandidateResponse(
        mode=mode,
        sample_index=index,
        raw_text="",
        global_index=index,
        solution=solution,
    )
    if answer_kind is None:
        answer_kind = "text" if isinstance(answer, str) else "number"
    if ok:
        cand.outcome = ExecutionOutcome(status="ok", value=answer, value_kind=answer_kind)
    else:
        cand.outcome = ExecutionOutcome(status="runtime-error", stderr="boom")
    cand.op_count = ops
    return cand


def load_fixture_json(name: str):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))
