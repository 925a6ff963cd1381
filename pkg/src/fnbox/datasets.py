"""Dataset ingestion, primitive-function registries, and example orderings.

Dataset file schemas are owned by this project (documented in the README);
converters from public datasets' native formats are expected to be thin and
external. Orderings are deterministic values: the shuffle uses a documented
portable PRNG, and the post-hoc ordering is rebuilt from a prior run's
per-example function usage.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import EnvironmentRef, Example, GoldAnswer

FORMATS = ("math-json", "table-inline-json", "table-csv-dir", "table-hier-json", "visual-json")

# Rendering thresholds: tables stay inline in prompts only while small.
INLINE_MAX_ROWS = 20
INLINE_MAX_CHARS = 2000
PREVIEW_ROWS = 5


class DatasetFormatError(Exception):
    """A dataset record violates its schema; names the record and field."""

    def __init__(self, index: int, fieldname: str, message: str):
        super().__init__(f"record {index}, field {fieldname!r}: {message}")
        self.index = index
        self.fieldname = fieldname


# ---------------------------------------------------------------------------
# Primitive registries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    """One pre-registered function advertised to the model in prompts."""

    name: str
    signature: str
    docstring: str
    provider: str  # built-in | table-lib | loader-fn | visual-stub


_PANDAS = Primitive(
    name="pandas",
    signature="import pandas as pd",
    docstring="DataFrame library for loading and querying tables.",
    provider="table-lib",
)

_PARSE_TABLE = Primitive(
    name="parse_table",
    signature="def parse_table(path: str) -> pd.DataFrame:",
    docstring="Load a hierarchical table file into a DataFrame; stacked header "
              "levels are joined with ' / '.",
    provider="loader-fn",
)

_VISUAL = [
    Primitive(
        name="load_image",
        signature="def load_image(path: str) -> Image:",
        docstring="Open the image at the given path.",
        provider="built-in",
    ),
    Primitive(
        name="visual_qa",
        signature="def visual_qa(image: Image, question: str) -> str:",
        docstring="Answer a free-form question about the image.",
        provider="visual-stub",
    ),
    Primitive(
        name="locate_objects",
        signature="def locate_objects(image: Image, object_name: str) -> list[list[int]]:",
        docstring="Find bounding boxes [x1, y1, x2, y2] of the named objects.",
        provider="visual-stub",
    ),
    Primitive(
        name="crop_region",
        signature="def crop_region(image: Image, box: list[int]) -> Image:",
        docstring="Crop the image to a bounding box.",
        provider="visual-stub",
    ),
]


def primitive_registry(fmt: str) -> list[Primitive]:
    """Primitives registered for a dataset format (beyond language built-ins)."""
    if fmt == "math-json":
        return []
    if fmt in ("table-inline-json", "table-csv-dir"):
        return [_PANDAS]
    if fmt == "table-hier-json":
        return [_PANDAS, _PARSE_TABLE]
    if fmt == "visual-json":
        return list(_VISUAL)
    raise ValueError(f"unknown dataset format {fmt!r}")


def task_for_format(fmt: str) -> str:
    """Prompt-template family for a dataset format."""
    if fmt == "math-json":
        return "math"
    if fmt in ("table-inline-json", "table-csv-dir", "table-hier-json"):
        return "table"
    if fmt == "visual-json":
        return "visual"
    raise ValueError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_dataset(path: str | Path, fmt: str, limit: int | None = None) -> list[Example]:
    """Read a dataset file or directory into Examples."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    if fmt == "math-json":
        examples = _load_math(path)
    elif fmt == "table-inline-json":
        examples = _load_table_inline(path)
    elif fmt == "table-csv-dir":
        examples = _load_table_csv_dir(path)
    elif fmt == "table-hier-json":
        examples = _load_table_hier(path)
    else:
        examples = _load_visual(path)
    if limit is not None:
        examples = examples[:limit]
    seen: set[str] = set()
    for i, ex in enumerate(examples):
        if ex.id in seen:
            raise DatasetFormatError(i, "id", f"duplicate id {ex.id!r}")
        seen.add(ex.id)
    return examples


def _require(record: dict, index: int, fieldname: str):
    if not isinstance(record, dict) or fieldname not in record:
        raise DatasetFormatError(index, fieldname, "missing")
    return record[fieldname]


def _gold_list(raw, index: int) -> list[GoldAnswer]:
    values = raw if isinstance(raw, list) else [raw]
    if not values:
        raise DatasetFormatError(index, "answer", "empty answer list")
    return [GoldAnswer.from_json(v) for v in values]


def _load_math(path: Path) -> list[Example]:
    records = json.loads(path.read_text(encoding="utf-8"))
    name = path.stem
    examples = []
    for i, rec in enumerate(records):
        examples.append(Example(
            id=str(_require(rec, i, "id")),
            query=str(_require(rec, i, "problem")),
            env=EnvironmentRef(kind="none"),
            gold=_gold_list(_require(rec, i, "answer"), i),
            dataset=name,
        ))
    return examples


def _load_table_inline(path: Path) -> list[Example]:
    records = json.loads(path.read_text(encoding="utf-8"))
    name = path.stem
    examples = []
    for i, rec in enumerate(records):
        table = _require(rec, i, "table")
        if not isinstance(table, dict) or "header" not in table or "rows" not in table:
            raise DatasetFormatError(i, "table", "expected {header, rows}")
        payload = json.dumps({"header": table["header"], "rows": table["rows"]})
        examples.append(Example(
            id=str(_require(rec, i, "id")),
            query=str(_require(rec, i, "question")),
            env=EnvironmentRef(kind="table-inline", payload=payload),
            gold=_gold_list(_require(rec, i, "answer"), i),
            dataset=name,
        ))
    return examples


def _load_table_csv_dir(path: Path) -> list[Example]:
    questions = path / "questions.jsonl"
    if not questions.exists():
        raise FileNotFoundError(f"{questions} not found")
    examples = []
    with questions.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rel = str(_require(rec, i, "table"))
            csv_path = (path / rel).resolve()
            if not csv_path.exists():
                raise DatasetFormatError(i, "table", f"CSV file {rel!r} not found")
            examples.append(Example(
                id=str(_require(rec, i, "id")),
                query=str(_require(rec, i, "question")),
                env=EnvironmentRef(kind="table-csv-file", payload=str(csv_path)),
                gold=_gold_list(_require(rec, i, "answer"), i),
                dataset=path.name,
            ))
    return examples


def _load_table_hier(path: Path) -> list[Example]:
    records = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    examples = []
    for i, rec in enumerate(records):
        rel = str(_require(rec, i, "table"))
        table_path = (base / rel).resolve()
        if not table_path.exists():
            raise DatasetFormatError(i, "table", f"table file {rel!r} not found")
        examples.append(Example(
            id=str(_require(rec, i, "id")),
            query=str(_require(rec, i, "question")),
            env=EnvironmentRef(kind="table-hierarchical-file", payload=str(table_path)),
            gold=_gold_list(_require(rec, i, "answer"), i),
            dataset=path.stem,
        ))
    return examples


def _load_visual(path: Path) -> list[Example]:
    records = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    examples = []
    for i, rec in enumerate(records):
        rel = str(_require(rec, i, "image"))
        image_path = (base / rel).resolve()
        if not image_path.exists():
            raise DatasetFormatError(i, "image", f"image file {rel!r} not found")
        examples.append(Example(
            id=str(_require(rec, i, "id")),
            query=str(_require(rec, i, "question")),
            env=EnvironmentRef(kind="image-file", payload=str(image_path)),
            gold=_gold_list(_require(rec, i, "answer"), i),
            dataset=path.stem,
        ))
    return examples


# ---------------------------------------------------------------------------
# Environment serialization for prompts
# ---------------------------------------------------------------------------

def _markdown_table(header: list, rows: list[list]) -> str:
    lines = ["| " + " | ".join(str(h) for h in header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines)


def serialize_environment(env: EnvironmentRef, max_chars: int = INLINE_MAX_CHARS) -> str:
    """Render an environment for a prompt, within a character budget."""
    if env.kind == "none":
        return ""
    if env.kind == "table-inline":
        spec = json.loads(env.payload)
        header, rows = spec["header"], spec["rows"]
        bound = "The table is also bound to the variable `df` as a pandas DataFrame."
        full = _markdown_table(header, rows)
        if len(rows) <= INLINE_MAX_ROWS and len(full) <= max_chars:
            return f"Table:\n{full}\n{bound}"
        preview = _markdown_table(header, rows[:PREVIEW_ROWS])
        text = f"Table (first {PREVIEW_ROWS} of {len(rows)} rows):\n{preview}\n{bound}"
        return text[:max_chars]
    if env.kind == "table-csv-file":
        with open(env.payload, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            table = list(reader)
        header, rows = table[0], table[1:]
        preview = _markdown_table(header, rows[:PREVIEW_ROWS])
        text = (
            f"Table preview (first {min(PREVIEW_ROWS, len(rows))} of {len(rows)} rows):\n"
            f"{preview}\n"
            "The full table is a CSV file; its path is bound to the variable "
            "`table_path`. Load it with pandas, e.g. `df = pd.read_csv(table_path)`."
        )
        return text[:max_chars]
    if env.kind == "table-hierarchical-file":
        text = (
            "The table has a hierarchical header and is stored in a structured file. "
            "Its path is bound to the variable `table_path`; load it with "
            "`df = parse_table(table_path)`."
        )
        return text[:max_chars]
    if env.kind == "image-file":
        text = (
            "The image path is bound to the variable `image_path`. Use "
            "`load_image(image_path)` and the visual primitive functions to inspect it."
        )
        return text[:max_chars]
    raise ValueError(f"unknown environment kind {env.kind!r}")


# ---------------------------------------------------------------------------
# Orderings
# ---------------------------------------------------------------------------

@dataclass
class OrderingPlan:
    """A permutation of example ids plus how it was produced."""

    kind: str  # original | shuffle | posthoc
    permutation: list[str]
    seed: int | None = None
    assumptions: list[str] = field(default_factory=list)


def _splitmix64(seed: int):
    """SplitMix64 stream: documented, portable, identical in any language."""
    state = seed & 0xFFFFFFFFFFFFFFFF

    def next_u64() -> int:
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        return z ^ (z >> 31)

    return next_u64


def original_ordering(examples: list[Example]) -> OrderingPlan:
    return OrderingPlan(kind="original", permutation=[ex.id for ex in examples])


def shuffle_ordering(examples: list[Example], seed: int) -> OrderingPlan:
    """Deterministic shuffle: backwards Fisher-Yates driven by SplitMix64.

    The draw at position i (from n-1 down to 1) is ``next_u64() % (i + 1)``;
    fixing both the PRNG and the seeding makes the permutation reproducible
    from the seed alone, independent of runtime or language.
    """
    ids = [ex.id for ex in examples]
    rng = _splitmix64(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = rng() % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return OrderingPlan(kind="shuffle", permutation=ids, seed=seed)


def posthoc_ordering(records, original_order: list[str]) -> OrderingPlan:
    """Cluster examples by the functions their solutions used in a prior run.

    Clusters are ranked by usage frequency (number of records touching the
    function), ties broken by earlier first use, then name. An example using
    several functions lands only in the last-ranked of its clusters, so every
    function it needs exists by the time it streams. Within a cluster (and in
    the trailing function-free cluster) examples keep original dataset order.
    """
    first_use: dict[str, int] = {}
    users: dict[str, list[str]] = {}
    for pos, rec in enumerate(records):
        for name in sorted(rec.used_functions):
            users.setdefault(name, []).append(rec.example_id)
            first_use.setdefault(name, pos)

    ranked = sorted(users, key=lambda n: (-len(users[n]), first_use[n], n))
    rank_of = {name: i for i, name in enumerate(ranked)}

    assignment: dict[str, int] = {}
    for rec in records:
        if rec.used_functions:
            assignment[rec.example_id] = max(rank_of[n] for n in rec.used_functions)

    clusters: list[list[str]] = [[] for _ in ranked]
    trailing: list[str] = []
    for ex_id in original_order:
        if ex_id in assignment:
            clusters[assignment[ex_id]].append(ex_id)
        else:
            trailing.append(ex_id)
    permutation = [ex_id for cluster in clusters for ex_id in cluster] + trailing

    return OrderingPlan(
        kind="posthoc",
        permutation=permutation,
        assumptions=[
            "equal-frequency clusters ranked by earlier first use",
            "examples using no function stream last, in original order",
        ],
    )


def apply_ordering(examples: list[Example], plan: OrderingPlan) -> list[Example]:
    """Reorder examples per the plan and stamp their stream indices."""
    by_id = {ex.id: ex for ex in examples}
    if sorted(plan.permutation) != sorted(by_id):
        raise ValueError("ordering permutation does not match dataset ids")
    ordered = []
    for i, ex_id in enumerate(plan.permutation):
        ex = by_id[ex_id]
        ex.stream_index = i
        ordered.append(ex)
    return ordered
