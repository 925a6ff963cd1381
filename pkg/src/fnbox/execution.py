"""Run candidate programs in sandbox workers; match answers; measure complexity.

The coordinator owns a pool of worker subprocesses (one serial worker each,
``python -m sandbox_worker``) and fans candidate executions out across them.
Answer matching and the operation-count metric implement the run's scoring
rules; the depth convention behind op_count is pinned by a frozen reference
corpus shipped with the package.
"""

from __future__ import annotations

import ast
import json
import logging
import os
import subprocess
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .model import (
    CandidateResponse,
    EnvironmentRef,
    ExecutionOutcome,
    GoldAnswer,
    Mode,
    Toolbox,
)
from .parsing import called_names

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Operation count (program complexity)
# ---------------------------------------------------------------------------

class OpCountError(Exception):
    """Program does not parse; the complexity metric is unavailable."""


def _node_depth(node: ast.AST) -> int:
    depths = [_node_depth(child) for child in ast.iter_child_nodes(node)]
    return 1 + max(depths) if depths else 1


def statement_depths(program: str) -> list[int]:
    """Tree depth of each top-level statement (leaves count 1)."""
    try:
        tree = ast.parse(program)
    except (SyntaxError, ValueError) as exc:
        raise OpCountError(f"program does not parse: {exc}") from exc
    return [_node_depth(stmt) for stmt in tree.body]


def op_count(program: str) -> int:
    """Complexity of a program: sum of per-statement syntax-tree depths."""
    return sum(statement_depths(program))


# ---------------------------------------------------------------------------
# Answer matching
# ---------------------------------------------------------------------------

def _as_float(value) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            return None
    return None


def _as_text(value) -> str:
    if isinstance(value, str):
        return value
    return str(value)


def match_answer(predicted, gold: list[GoldAnswer]) -> bool:
    """True iff the predicted value matches any gold answer.

    Text golds compare by exact string match after whitespace trimming.
    Numeric golds convert the prediction to a float (failure means no match),
    round both sides to two decimals, and accept differences below 1e-6.
    """
    for answer in gold:
        if answer.kind == "number":
            value = _as_float(predicted)
            if value is None:
                continue
            if abs(round(value, 2) - round(float(answer.value), 2)) < 1e-6:
                return True
        else:
            if _as_text(predicted).strip() == str(answer.value).strip():
                return True
    return False


def answer_group_key(value, value_kind: str | None):
    """Normalization key used to group candidate answers for agreement voting."""
    if value_kind == "number":
        return ("number", round(float(value), 2))
    return ("text", str(value).strip())


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

class WorkerError(Exception):
    """The worker subprocess broke protocol or died unexpectedly."""


class _Worker:
    """Handle on one sandbox worker subprocess; requests are serial per worker."""

    def __init__(self, visual_fixture: str | None = None):
        self._visual_fixture = visual_fixture
        self._next_id = 0
        self._spawn()

    def _spawn(self) -> None:
        cmd = [sys.executable, "-u", "-m", "sandbox_worker"]
        if self._visual_fixture:
            cmd += ["--visual-fixture", self._visual_fixture]
        self._proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
        )

    def request(self, payload: dict) -> dict:
        self._next_id += 1
        payload = dict(payload, id=self._next_id)
        line = json.dumps(payload)
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
            response = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            self._respawn()
            raise WorkerError(f"worker pipe broke: {exc}") from exc
        if not response:
            self._respawn()
            raise WorkerError("worker closed its output stream")
        data = json.loads(response)
        if data.get("id") != self._next_id:
            self._respawn()
            raise WorkerError(f"response id mismatch: {data.get('id')} != {self._next_id}")
        return data

    def _respawn(self) -> None:
        self.close()
        self._spawn()

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
        self._proc.wait()


class WorkerPool:
    """Fixed-size pool of sandbox workers with parallel batch execution."""

    def __init__(self, size: int | None = None, visual_fixture: str | None = None):
        self.size = size or os.cpu_count() or 1
        self._workers = [_Worker(visual_fixture) for _ in range(self.size)]
        self._free: list[_Worker] = list(self._workers)
        self._lock = threading.Lock()
        self._available = threading.Semaphore(self.size)

    def _checkout(self) -> _Worker:
        self._available.acquire()
        with self._lock:
            return self._free.pop()

    def _checkin(self, worker: _Worker) -> None:
        with self._lock:
            self._free.append(worker)
        self._available.release()

    def _request(self, payload: dict) -> dict:
        worker = self._checkout()
        try:
            return worker.request(payload)
        finally:
            self._checkin(worker)

    def execute(self, code: str, env: EnvironmentRef, timeout_ms: int,
                answer_var: str = "ans", limits: dict | None = None) -> ExecutionOutcome:
        payload = {
            "op": "execute",
            "code": code,
            "env": _env_payload(env),
            "answer_var": answer_var,
            "timeout_ms": timeout_ms,
            "limits": limits or {},
        }
        try:
            data = self._request(payload)
        except WorkerError as exc:
            return ExecutionOutcome(status="runtime-error", stderr=str(exc))
        return ExecutionOutcome(
            status=data["status"],
            value=data.get("value"),
            value_kind=data.get("value_type"),
            stderr=data.get("stderr", ""),
            wall_ms=data.get("wall_ms", 0),
        )

    def execute_many(self, requests: list[tuple[str, EnvironmentRef, int, str]]) -> list[ExecutionOutcome]:
        """Run several programs in parallel; results come back in input order."""
        if not requests:
            return []
        with ThreadPoolExecutor(max_workers=self.size) as pool:
            futures = [pool.submit(self.execute, *req) for req in requests]
            return [f.result() for f in futures]

    def parse_depths(self, code: str) -> list[int] | None:
        data = self._request({"op": "parse", "code": code})
        if data["status"] != "ok":
            return None
        return data["depths"]

    def close(self) -> None:
        for worker in self._workers:
            worker.close()

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _env_payload(env: EnvironmentRef) -> dict:
    if env.kind == "none":
        return {"kind": "none", "inline": None, "path": None}
    if env.kind == "table-inline":
        return {"kind": env.kind, "inline": env.payload, "path": None}
    return {"kind": env.kind, "inline": None, "path": env.payload}


# ---------------------------------------------------------------------------
# Candidate orchestration
# ---------------------------------------------------------------------------

@dataclass
class ExecutionPlan:
    """Full program text for one candidate: support functions + solution."""

    program: str


def support_sources(candidate: CandidateResponse, toolbox: Toolbox) -> list[str]:
    """Sources to prepend before a candidate's solution.

    IMPORT and CREATE candidates get the toolbox functions they reference
    (transitively, since induced functions may call each other) in insertion
    order; every candidate gets its own induced functions.
    """
    sources: list[str] = []
    if candidate.mode in (Mode.IMPORT, Mode.CREATE) and len(toolbox):
        needed = _transitive_toolbox_refs(candidate, toolbox)
        sources.extend(fn.source for fn in toolbox if fn.name in needed)
    sources.extend(fn.source for fn in candidate.functions)
    return sources


def _transitive_toolbox_refs(candidate: CandidateResponse, toolbox: Toolbox) -> set[str]:
    names = set(toolbox.names())
    seeds = called_names(candidate.solution)
    for fn in candidate.functions:
        seeds |= called_names(fn.source)
    needed = seeds & names
    frontier = list(needed)
    while frontier:
        fn_name = frontier.pop()
        for ref in called_names(toolbox.get(fn_name).source) & names:
            if ref not in needed:
                needed.add(ref)
                frontier.append(ref)
    return needed


def build_program(candidate: CandidateResponse, toolbox: Toolbox) -> str:
    parts = support_sources(candidate, toolbox)
    parts.append(candidate.solution)
    return "\n".join(p for p in parts if p.strip())


def execute_candidates(candidates: list[CandidateResponse], toolbox: Toolbox,
                       env: EnvironmentRef, pool: WorkerPool, timeout_ms: int,
                       answer_var: str = "ans") -> None:
    """Execute all candidates in place: fills ``outcome`` and ``op_count``.

    Candidates whose code failed to parse at split time skip the sandbox and
    are marked parse-error directly; they are dead for voting either way.
    """
    pending: list[tuple[int, str]] = []
    for i, cand in enumerate(candidates):
        try:
            cand.op_count = op_count(cand.solution)
        except OpCountError:
            cand.op_count = None
        if cand.outcome is not None:
            continue
        if cand.op_count is None and not cand.solution.strip():
            cand.outcome = ExecutionOutcome(status="parse-error", stderr="empty program")
            continue
        pending.append((i, build_program(cand, toolbox)))

    requests = [(program, env, timeout_ms, answer_var) for _, program in pending]
    outcomes = pool.execute_many(requests)
    for (i, _), outcome in zip(pending, outcomes):
        candidates[i].outcome = outcome
