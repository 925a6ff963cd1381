"""Shared domain types: examples, the function toolbox, candidates, run records.

The :class:`Toolbox` is the single mutable store of the run. It is
single-writer by construction: the stream loop mutates it between examples,
while candidate generation only ever sees read-only snapshots.
"""

from __future__ import annotations

import ast
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class Mode(str, Enum):
    """LM interaction regime for one sampled response."""

    IMPORT = "IMPORT"
    CREATE = "CREATE"
    SKIP = "SKIP"
    PRIMITIVE = "PRIMITIVE"
    INSTANCE = "INSTANCE"


class Method(str, Enum):
    """Pipeline variant driving a run."""

    PRIMITIVE = "primitive"
    INSTANCE = "instance"
    TROVE = "trove"


ENV_KINDS = ("none", "table-inline", "table-csv-file", "table-hierarchical-file", "image-file")


class ToolboxError(Exception):
    """Base class for toolbox store failures."""


class FunctionSourceError(ToolboxError):
    """Function source rejected: not exactly one parseable definition."""


class UnknownFunctionError(ToolboxError):
    """A named function is absent from the toolbox."""


class ToolboxLoadError(ToolboxError):
    """Persisted toolbox file is corrupt; carries the offending key path."""

    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


@dataclass
class GoldAnswer:
    """One acceptable ground-truth answer, either text or numeric."""

    kind: str  # "text" | "number"
    value: str | float

    def __post_init__(self):
        if self.kind == "number":
            value = float(self.value)
            if not math.isfinite(value):
                raise ValueError("numeric gold answers must be finite")
            self.value = value
        elif self.kind == "text":
            self.value = str(self.value)
        else:
            raise ValueError(f"unknown gold answer kind {self.kind!r}")

    @classmethod
    def from_json(cls, raw: Any) -> "GoldAnswer":
        if isinstance(raw, bool):
            return cls("text", str(raw))
        if isinstance(raw, (int, float)):
            return cls("number", float(raw))
        return cls("text", str(raw))


@dataclass
class EnvironmentRef:
    """Reference to the grounding environment of one example."""

    kind: str = "none"
    payload: str = ""  # inline text or file path, depending on kind
    preview: str | None = None

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")

    @property
    def is_file_backed(self) -> bool:
        return self.kind in ("table-csv-file", "table-hierarchical-file", "image-file")


@dataclass
class Example:
    """One task instance: query, environment, gold answers."""

    id: str
    query: str
    env: EnvironmentRef
    gold: list[GoldAnswer]
    dataset: str = ""
    stream_index: int = -1

    def __post_init__(self):
        if not self.gold:
            raise ValueError(f"example {self.id!r} has no gold answers")


@dataclass
class ToolFunction:
    """One induced function stored in the toolbox."""

    name: str
    source: str
    signature: str
    docstring: str | None = None
    created_at_step: int = 0
    usage_count: int = 0
    origin_example_id: str = ""


@dataclass
class TrimEvent:
    """Record of one trim pass over the toolbox."""

    step: int
    threshold: float  # serialized under the key "lambda"
    removed: list[str] = field(default_factory=list)


@dataclass
class ExecutionOutcome:
    """Result of running one candidate program in the sandbox."""

    status: str  # ok | runtime-error | timeout | parse-error
    value: Any = None
    value_kind: str | None = None  # "number" | "text" when status == ok
    stderr: str = ""
    wall_ms: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class CandidateResponse:
    """One sampled LM output, parsed and (eventually) executed."""

    mode: Mode
    sample_index: int
    raw_text: str
    global_index: int
    functions: list[ToolFunction] = field(default_factory=list)
    solution: str = ""
    outcome: ExecutionOutcome | None = None
    op_count: int | None = None


@dataclass
class RunRecord:
    """Per-example resolution: the adopted solution and its bookkeeping."""

    example_id: str
    chosen: CandidateResponse | None
    correct: bool
    used_functions: set[str] = field(default_factory=set)
    added_functions: list[str] = field(default_factory=list)
    re_solved: bool = False

    @property
    def solved(self) -> bool:
        return self.chosen is not None


@dataclass
class RunConfig:
    """Declarative knobs for one run; mirrors the CLI config document."""

    method: Method = Method.TROVE
    k_samples: int = 5
    demo_count: int = 2
    trim_interval: int = 200
    trim_coefficient: float = 0.5
    trim_enabled: bool = True
    temperature: float = 0.6
    top_p: float = 0.95
    max_tokens: int = 512
    exec_timeout_ms: int = 10_000
    exec_workers: int | None = None
    seed: int = 0
    num_runs: int = 5
    ordering: str = "original"  # original | shuffle | posthoc
    ordering_file: str | None = None
    answer_var: str = "ans"
    mode_order: str = "import,create,skip"  # candidate order, ties break on it

    def __post_init__(self):
        self.method = Method(self.method)
        if self.k_samples < 1:
            raise ValueError("k_samples must be >= 1")
        if self.trim_interval < 1:
            raise ValueError("trim_interval must be >= 1")
        if self.trim_coefficient <= 0:
            raise ValueError("trim_coefficient must be > 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.exec_timeout_ms <= 0:
            raise ValueError("exec_timeout_ms must be > 0")
        if self.ordering not in ("original", "shuffle", "posthoc"):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        modes = [m.strip().upper() for m in self.mode_order.split(",")]
        if sorted(modes) != ["CREATE", "IMPORT", "SKIP"]:
            raise ValueError("mode_order must list import, create, skip exactly once each")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["method"] = self.method.value
        return data

    def trove_modes(self) -> tuple[Mode, ...]:
        return tuple(Mode(m.strip().upper()) for m in self.mode_order.split(","))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Tool function parsing
# ---------------------------------------------------------------------------

def parse_tool_function(source: str, created_at_step: int = 0,
                        origin_example_id: str = "") -> ToolFunction:
    """Validate and wrap a source block that must hold exactly one function."""
    try:
        tree = ast.parse(source)
    except (SyntaxError, ValueError) as exc:
        raise FunctionSourceError(f"function source does not parse: {exc}") from exc
    defs = [n for n in tree.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))]
    if len(tree.body) != 1 or len(defs) != 1:
        raise FunctionSourceError(
            f"expected exactly one function definition, got {len(defs)} "
            f"among {len(tree.body)} top-level statements"
        )
    node = defs[0]
    signature = f"def {node.name}({ast.unparse(node.args)}):"
    return ToolFunction(
        name=node.name,
        source=source.strip("\n"),
        signature=signature,
        docstring=ast.get_docstring(node),
        created_at_step=created_at_step,
        origin_example_id=origin_example_id,
    )


# ---------------------------------------------------------------------------
# Toolbox store
# ---------------------------------------------------------------------------

class Toolbox:
    """Ordered library of induced functions with a trim history.

    Iteration order is insertion order and survives removals. Adding a
    function under an existing name replaces the source but keeps the
    accumulated usage count (collisions are logged, not fatal).
    """

    def __init__(self):
        self._functions: dict[str, ToolFunction] = {}
        self.trim_log: list[TrimEvent] = []
        self.created_count = 0
        self.removed_count = 0

    # -- read access ---------------------------------------------------

    def __len__(self) -> int:
        return len(self._functions)

    def __contains__(self, name: str) -> bool:
        return name in self._functions

    def __iter__(self) -> Iterator[ToolFunction]:
        return iter(self._functions.values())

    def names(self) -> list[str]:
        return list(self._functions)

    def get(self, name: str) -> ToolFunction:
        try:
            return self._functions[name]
        except KeyError:
            raise UnknownFunctionError(f"unknown function {name}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Toolbox):
            return NotImplemented
        return (
            self._functions == other._functions
            and self.trim_log == other.trim_log
            and self.created_count == other.created_count
            and self.removed_count == other.removed_count
        )

    # -- mutation (single writer: the stream loop) ----------------------

    def add(self, fn: ToolFunction) -> None:
        """Insert ``fn``; on a name collision replace source, keep usage."""
        parse_tool_function(fn.source)  # reject malformed sources
        existing = self._functions.get(fn.name)
        if existing is not None:
            log.info("toolbox collision: replacing source of %s (usage kept at %d)",
                     fn.name, existing.usage_count)
            existing.source = fn.source
            existing.signature = fn.signature
            existing.docstring = fn.docstring
            existing.origin_example_id = fn.origin_example_id
            return
        self._functions[fn.name] = fn
        self.created_count += 1

    def increment_usage(self, names: Iterable[str]) -> None:
        """Bump each named function's usage by one (once per name)."""
        names = set(names)
        for name in names:
            if name not in self._functions:
                raise UnknownFunctionError(f"unknown function {name}")
        for name in names:
            self._functions[name].usage_count += 1

    def remove_many(self, names: Iterable[str]) -> None:
        for name in names:
            if name not in self._functions:
                raise UnknownFunctionError(f"unknown function {name}")
            del self._functions[name]
            self.removed_count += 1

    # -- persistence ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "functions": [
                {
                    "name": f.name,
                    "source": f.source,
                    "signature": f.signature,
                    "docstring": f.docstring,
                    "created_at_step": f.created_at_step,
                    "usage_count": f.usage_count,
                    "origin_example_id": f.origin_example_id,
                }
                for f in self
            ],
            "trim_log": [
                {"step": e.step, "lambda": e.threshold, "removed": list(e.removed)}
                for e in self.trim_log
            ],
            "counters": {"created": self.created_count, "removed": self.removed_count},
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Toolbox":
        box = cls()
        if not isinstance(data, dict):
            raise ToolboxLoadError("$", "expected a JSON object")
        if data.get("schema") != SCHEMA_VERSION:
            raise ToolboxLoadError("schema", f"unsupported schema {data.get('schema')!r}")
        functions = data.get("functions")
        if not isinstance(functions, list):
            raise ToolboxLoadError("functions", "expected a list")
        for i, entry in enumerate(functions):
            for key in ("name", "source", "signature", "created_at_step",
                        "usage_count", "origin_example_id"):
                if not isinstance(entry, dict) or key not in entry:
                    raise ToolboxLoadError(f"functions[{i}].{key}", "missing field")
            fn = ToolFunction(
                name=entry["name"],
                source=entry["source"],
                signature=entry["signature"],
                docstring=entry.get("docstring"),
                created_at_step=entry["created_at_step"],
                usage_count=entry["usage_count"],
                origin_example_id=entry["origin_example_id"],
            )
            if fn.usage_count < 0:
                raise ToolboxLoadError(f"functions[{i}].usage_count", "negative usage count")
            box._functions[fn.name] = fn
        trim_log = data.get("trim_log", [])
        if not isinstance(trim_log, list):
            raise ToolboxLoadError("trim_log", "expected a list")
        for i, entry in enumerate(trim_log):
            for key in ("step", "lambda", "removed"):
                if not isinstance(entry, dict) or key not in entry:
                    raise ToolboxLoadError(f"trim_log[{i}].{key}", "missing field")
            box.trim_log.append(TrimEvent(step=entry["step"], threshold=entry["lambda"],
                                          removed=list(entry["removed"])))
        counters = data.get("counters")
        if counters is not None:
            box.created_count = counters.get("created", len(box._functions))
            box.removed_count = counters.get("removed", sum(len(e.removed) for e in box.trim_log))
        else:
            box.removed_count = sum(len(e.removed) for e in box.trim_log)
            box.created_count = len(box._functions) + box.removed_count
        return box


def save_toolbox(toolbox: Toolbox, path: str | Path) -> None:
    Path(path).write_text(json.dumps(toolbox.to_json_dict(), indent=2) + "\n", encoding="utf-8")


def load_toolbox(path: str | Path) -> Toolbox:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ToolboxLoadError("$", f"not valid JSON: {exc}") from exc
    return Toolbox.from_json_dict(data)
