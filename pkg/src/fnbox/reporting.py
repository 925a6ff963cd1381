"""Metric computation and aggregation for runs and verification studies.

Conventions declared in every report: accuracy counts unsolved examples as
incorrect over the full denominator, while the mean operation count covers
only records whose adopted solution parsed.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

from .model import Method, RunRecord, Toolbox, TrimEvent

REPORT_NOTES = [
    "accuracy counts unsolved examples as incorrect",
    "mean ops excludes unsolved and unparseable chosen solutions",
]


@dataclass
class RunMetrics:
    """The three headline metrics of one run."""

    method: Method
    acc: float
    mean_ops: float | None
    lib_size: int | None  # None for primitive-only runs (rendered as an em dash)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "acc": self.acc,
            "mean_ops": self.mean_ops,
            "lib_size": self.lib_size,
        }


def compute_metrics(records: list[RunRecord], toolbox: Toolbox, method: Method,
                    instance_ledger: set | None = None) -> RunMetrics:
    """Accuracy over all records, mean ops over parsed solutions, library size."""
    method = Method(method)
    total = len(records)
    acc = sum(1 for r in records if r.correct) / total if total else 0.0
    ops = [r.chosen.op_count for r in records
           if r.chosen is not None and r.chosen.op_count is not None]
    mean_ops = sum(ops) / len(ops) if ops else None
    if method == Method.PRIMITIVE:
        lib_size = None
    elif method == Method.INSTANCE:
        lib_size = len(instance_ledger or ())
    else:
        lib_size = len(toolbox)
    return RunMetrics(method=method, acc=acc, mean_ops=mean_ops, lib_size=lib_size)


@dataclass
class BestOfRuns:
    """Best run under the multi-run protocol, plus cross-run spread."""

    best_index: int
    best: RunMetrics
    runs: list[RunMetrics]
    std: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "best_index": self.best_index,
            "best": self.best.to_dict(),
            "runs": [m.to_dict() for m in self.runs],
            "std": self.std,
            "selection_rule": "max accuracy, ties by lower mean ops, then run order",
        }


def best_of_runs(runs: list[RunMetrics]) -> BestOfRuns:
    """Pick the best run: highest accuracy, ties by lower mean ops, then index."""
    if not runs:
        raise ValueError("best_of_runs needs at least one run")
    ops = lambda m: m.mean_ops if m.mean_ops is not None else math.inf
    best_index = min(range(len(runs)), key=lambda i: (-runs[i].acc, ops(runs[i]), i))

    def pstd(values):
        values = [v for v in values if v is not None]
        return statistics.pstdev(values) if values else None

    std = {
        "acc": pstd([m.acc for m in runs]),
        "mean_ops": pstd([m.mean_ops for m in runs]),
        "lib_size": pstd([m.lib_size for m in runs]),
    }
    return BestOfRuns(best_index=best_index, best=runs[best_index], runs=list(runs), std=std)


def growth_trace(records: list[RunRecord], trim_log: list[TrimEvent]) -> list[tuple[int, int]]:
    """Library size after each step, rebuilt from additions and trim events.

    Records keep their added_functions even when later re-solved, so the
    series reflects the historical toolbox, not the final one. Without trim
    events the series is non-decreasing.
    """
    removed_at: dict[int, int] = {}
    for event in trim_log:
        removed_at[event.step] = removed_at.get(event.step, 0) + len(event.removed)
    series: list[tuple[int, int]] = []
    size = 0
    for i, record in enumerate(records):
        step = i + 1
        size += len(record.added_functions)
        size -= removed_at.get(step, 0)
        series.append((step, size))
    return series


# ---------------------------------------------------------------------------
# Verification-study statistics
# ---------------------------------------------------------------------------

class UnknownJudgmentError(Exception):
    """A judgment references an item absent from the session bundle."""


@dataclass
class VerifierStats:
    """Detection accuracy and decision time for one method, across verifiers."""

    acc_avg: float
    acc_std: float
    time_avg_s: float
    time_std_s: float
    verifiers: int

    def to_dict(self) -> dict:
        return {
            "acc_avg": self.acc_avg,
            "acc_std": self.acc_std,
            "time_avg_s": self.time_avg_s,
            "time_std_s": self.time_std_s,
            "verifiers": self.verifiers,
        }


def join_judgments(judgments: list[dict], bundle: dict) -> list[dict]:
    """Attach ground truth and the unblinded method to raw judgment rows."""
    items = {(item["example_id"], item["method_label"]): item for item in bundle["items"]}
    label_map = bundle["label_map"]
    joined = []
    for row in judgments:
        key = (row["example_id"], row["method_label"])
        if key not in items:
            raise UnknownJudgmentError(f"judgment references unknown item {key!r}")
        item = items[key]
        joined.append({
            "verifier_id": row["verifier_id"],
            "example_id": row["example_id"],
            "method": label_map[row["method_label"]],
            "judged_correct": bool(row["judged_correct"]),
            "truth_correct": bool(item["truth_correct"]),
            "elapsed_ms": row["elapsed_ms"],
        })
    return joined


def verification_stats(judgments: list[dict]) -> dict[str, VerifierStats]:
    """Per-method detection accuracy and time, averaged across verifiers.

    Accuracy and time are first computed per verifier, then the mean and
    population standard deviation are taken over verifiers.
    """
    by_method: dict[str, dict[str, list[dict]]] = {}
    for row in judgments:
        by_method.setdefault(row["method"], {}).setdefault(row["verifier_id"], []).append(row)

    stats: dict[str, VerifierStats] = {}
    for method, by_verifier in sorted(by_method.items()):
        accs, times = [], []
        for _, rows in sorted(by_verifier.items()):
            accs.append(sum(1 for r in rows if r["judged_correct"] == r["truth_correct"]) / len(rows))
            times.append(sum(r["elapsed_ms"] for r in rows) / len(rows) / 1000.0)
        stats[method] = VerifierStats(
            acc_avg=statistics.mean(accs),
            acc_std=statistics.pstdev(accs),
            time_avg_s=statistics.mean(times),
            time_std_s=statistics.pstdev(times),
            verifiers=len(accs),
        )
    return stats


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_metrics_table(metrics_by_label: dict[str, RunMetrics]) -> str:
    """Plain-text metric table with an em dash for absent library sizes."""
    header = f"{'method':<12} {'acc':>6} {'#ops':>8} {'#lib':>6}"
    lines = [header, "-" * len(header)]
    for label, m in metrics_by_label.items():
        ops = f"{m.mean_ops:.1f}" if m.mean_ops is not None else "—"
        lib = str(m.lib_size) if m.lib_size is not None else "—"
        lines.append(f"{label:<12} {m.acc:>6.2f} {ops:>8} {lib:>6}")
    return "\n".join(lines)


def report_dict(metrics: RunMetrics, extra: dict | None = None) -> dict:
    report = {"notes": list(REPORT_NOTES), "metrics": metrics.to_dict()}
    if extra:
        report.update(extra)
    return report
