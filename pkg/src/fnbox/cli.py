"""Operator command surface.

Exit codes: 0 success, 1 flag/config validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import datasets, engine, reporting, verifyserve
from .execution import WorkerPool
from .gateway import DemoBank, HttpBackend, ScriptedMockBackend
from .model import Method, RunConfig, Toolbox, load_toolbox, save_toolbox

log = logging.getLogger(__name__)


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; we reserve 2 for runtime
    # failures and use 1 for validation problems.
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    data: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} not found")
        data = json.loads(path.read_text(encoding="utf-8"))
    overrides = {
        "method": getattr(args, "method", None),
        "seed": getattr(args, "seed", None),
        "k_samples": getattr(args, "k", None),
        "num_runs": getattr(args, "runs", None),
        "exec_workers": getattr(args, "workers", None),
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    try:
        return RunConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}")


def _make_backend(args):
    if args.backend == "mock":
        if not args.mock_script:
            raise CliError("--backend mock requires --mock-script")
        return ScriptedMockBackend.from_file(args.mock_script)
    if not args.base_url or not args.model:
        raise CliError("--backend http requires --base-url and --model")
    return HttpBackend(args.base_url, args.model, token_env=args.token_env)


def _load_examples(args):
    path = Path(args.dataset)
    if not path.exists():
        raise CliError(f"dataset {path} not found")
    return datasets.load_dataset(path, args.format, limit=args.limit)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def _ordering_plan(examples, config: RunConfig, seed: int, ordering_file: str | None):
    if config.ordering == "original":
        return datasets.original_ordering(examples)
    if config.ordering == "shuffle":
        return datasets.shuffle_ordering(examples, seed)
    if not ordering_file:
        raise CliError("posthoc ordering requires --records with a prior run")
    prior_rows = _read_jsonl(Path(ordering_file))
    prior = [_RecordView(r) for r in prior_rows]
    return datasets.posthoc_ordering(prior, [ex.id for ex in examples])


class _RecordView:
    """Minimal record shim for ordering built from persisted JSONL rows."""

    def __init__(self, row: dict):
        self.example_id = row["example_id"]
        self.used_functions = set(row.get("used_functions", []))


def _execute_run(examples, config: RunConfig, backend, args, out_dir: Path,
                 seed: int) -> reporting.RunMetrics:
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = _ordering_plan(examples, config, seed, getattr(args, "ordering_records", None)
                          or config.ordering_file)
    ordered = datasets.apply_ordering(examples, plan)
    started = time.monotonic()
    with WorkerPool(config.exec_workers, visual_fixture=getattr(args, "visual_fixture", None)) as pool:
        demo_bank = (DemoBank.from_file(args.demos, args.format) if getattr(args, "demos", None)
                     else DemoBank.default())
        result = engine.run_stream(ordered, config, backend, pool, demo_bank)
    wall_s = time.monotonic() - started

    _write_jsonl(out_dir / "records.jsonl", [engine.record_to_json_dict(r) for r in result.records])
    save_toolbox(result.toolbox, out_dir / "toolbox.json")
    _write_json(out_dir / "report.json", reporting.report_dict(result.metrics))
    _write_jsonl(out_dir / "trajectory.jsonl", result.trajectory)
    if config.method == Method.INSTANCE:
        ledger = [{"name": name, "source": source}
                  for name, source in sorted(result.instance_ledger)]
        _write_json(out_dir / "instance_ledger.json", ledger)
    _write_json(out_dir / "run_meta.json", {
        "config": config.to_dict(),
        "seed": seed,
        "ordering": {"kind": plan.kind, "seed": plan.seed, "assumptions": plan.assumptions},
        "mode_order": [m.value for m in config.trove_modes()],
        "wall_s": round(wall_s, 3),
        "dataset": str(args.dataset),
        "backend": args.backend,
    })
    return result.metrics


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config = _load_config(args)
    examples = _load_examples(args)
    backend = _make_backend(args)
    out = Path(args.out)
    runs = args.runs if args.runs is not None else config.num_runs
    metrics_list = []
    for run_index in range(runs):
        run_dir = out if runs == 1 else out / f"run_{run_index:03d}"
        seed = config.seed + run_index
        metrics_list.append(_execute_run(examples, config, backend, args, run_dir, seed))
    if runs > 1:
        best = reporting.best_of_runs(metrics_list)
        _write_json(out / "best_report.json", best.to_dict())
        print(reporting.render_metrics_table(
            {f"run {i}": m for i, m in enumerate(metrics_list)}))
        print(f"best run: {best.best_index}")
    else:
        print(reporting.render_metrics_table({config.method.value: metrics_list[0]}))
    return 0


def cmd_ablate_order(args) -> int:
    config = _load_config(args)
    backend = _make_backend(args)
    out = Path(args.out)
    if args.mode == "shuffle":
        if not args.seeds:
            raise CliError("--mode shuffle requires --seeds")
        seeds = [int(s) for s in args.seeds.split(",")]
        metrics_list = []
        for seed in seeds:
            examples = _load_examples(args)
            run_config = RunConfig.from_dict({**config.to_dict(), "ordering": "shuffle",
                                              "seed": seed})
            metrics_list.append(_execute_run(examples, run_config, backend, args,
                                             out / f"shuffle_{seed}", seed))
        summary = reporting.best_of_runs(metrics_list).to_dict()
        summary["seeds"] = seeds
        _write_json(out / "ordering_summary.json", summary)
        print(reporting.render_metrics_table(
            {f"seed {s}": m for s, m in zip(seeds, metrics_list)}))
        return 0
    if not args.records:
        raise CliError("--mode posthoc requires --records from a prior run")
    examples = _load_examples(args)
    run_config = RunConfig.from_dict({**config.to_dict(), "ordering": "posthoc",
                                      "ordering_file": args.records})
    metrics = _execute_run(examples, run_config, backend, args, out / "posthoc", config.seed)
    print(reporting.render_metrics_table({"posthoc": metrics}))
    return 0


def cmd_ablate_no_trim(args) -> int:
    config = _load_config(args)
    if config.method != Method.TROVE:
        raise CliError("trim ablation only applies to the trove method")
    examples = _load_examples(args)
    backend = _make_backend(args)
    out = Path(args.out)
    run_config = RunConfig.from_dict({**config.to_dict(), "trim_enabled": False})
    metrics = _execute_run(examples, run_config, backend, args, out, config.seed)

    trace = [(row["step"], row["size"]) for row in _read_jsonl(out / "trajectory.jsonl")]
    with (out / "growth_trace.csv").open("w", encoding="utf-8") as fh:
        fh.write("step,library_size\n")
        for step, size in trace:
            fh.write(f"{step},{size}\n")
    print(reporting.render_metrics_table({"no-trim": metrics}))
    return 0


def cmd_score(args) -> int:
    examples = datasets.load_dataset(args.gold, args.format)
    by_id = {ex.id: ex for ex in examples}
    rows = _read_jsonl(Path(args.records))
    from .execution import match_answer

    total, correct, disagreements = 0, 0, 0
    ops = []
    for row in rows:
        ex = by_id.get(row["example_id"])
        if ex is None:
            raise CliError(f"record {row['example_id']!r} not in gold dataset")
        total += 1
        is_correct = row["answer"] is not None and match_answer(row["answer"], ex.gold)
        correct += int(is_correct)
        if is_correct != bool(row.get("correct")):
            disagreements += 1
        if row.get("op_count") is not None:
            ops.append(row["op_count"])
    payload = {
        "examples": total,
        "acc": correct / total if total else 0.0,
        "mean_ops": sum(ops) / len(ops) if ops else None,
        "stored_correct_disagreements": disagreements,
    }
    print(json.dumps(payload, indent=2))
    return 0


def _parse_labeled_paths(values: list[str], default_prefix: str) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for i, value in enumerate(values):
        if "=" in value:
            name, _, raw = value.partition("=")
        else:
            raw = value
            name = Path(raw).parent.name or f"{default_prefix}{i}"
        path = Path(raw)
        if not path.exists():
            raise CliError(f"file {path} not found")
        if name in out:
            raise CliError(f"duplicate label {name!r}")
        out[name] = path
    return out


def cmd_export_verify(args) -> int:
    records_by_method = {
        name: _read_jsonl(path)
        for name, path in _parse_labeled_paths(args.records, "method").items()
    }
    sources_by_method: dict[str, dict[str, str]] = {}
    for name, path in _parse_labeled_paths(args.toolbox or [], "toolbox").items():
        box = load_toolbox(path)
        sources_by_method[name] = {fn.name: fn.source for fn in box}
    examples = datasets.load_dataset(args.dataset, args.format)
    bundle = verifyserve.build_verify_bundle(records_by_method, examples,
                                             args.sample, args.seed,
                                             sources_by_method)
    _write_json(Path(args.out), bundle)
    print(f"wrote {len(bundle['items'])} items "
          f"({len(bundle['label_map'])} methods) to {args.out}")
    return 0


def cmd_verify_stats(args) -> int:
    bundle = json.loads(Path(args.session).read_text(encoding="utf-8"))
    judgments = _read_jsonl(Path(args.judgments))
    joined = reporting.join_judgments(judgments, bundle)
    stats = reporting.verification_stats(joined)
    header = f"{'method':<12} {'acc avg':>8} {'acc std':>8} {'time avg (s)':>13} {'time std':>9}"
    print(header)
    print("-" * len(header))
    for method, s in stats.items():
        print(f"{method:<12} {s.acc_avg:>8.3f} {s.acc_std:>8.3f} "
              f"{s.time_avg_s:>13.2f} {s.time_std_s:>9.3f}")
    if args.json_out:
        _write_json(Path(args.json_out), {m: s.to_dict() for m, s in stats.items()})
    return 0


def cmd_serve_verify(args) -> int:
    session_path = Path(args.session)
    if not session_path.exists():
        raise CliError(f"session file {session_path} not found")
    bundle = json.loads(session_path.read_text(encoding="utf-8"))
    judgments = Path(args.judgments) if args.judgments else session_path.with_name("judgments.jsonl")
    server = verifyserve.serve_session(bundle, judgments, args.port, ui_dir=args.ui_dir)
    print(f"serving verification session on http://127.0.0.1:{args.port}/ "
          f"({len(bundle['items'])} items; judgments -> {judgments})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


def cmd_toolbox_show(args) -> int:
    box: Toolbox = load_toolbox(args.file)
    print(f"{len(box)} functions "
          f"(created {box.created_count}, removed {box.removed_count})")
    for fn in box:
        doc = f"  {fn.docstring.splitlines()[0]}" if fn.docstring else ""
        print(f"- {fn.name}  [usage {fn.usage_count}, step {fn.created_at_step}]")
        print(f"  {fn.signature}{doc and chr(10) + doc}")
    if box.trim_log:
        print("trim events:")
        for event in box.trim_log:
            print(f"  step {event.step}: threshold {event.threshold:.4f}, "
                  f"removed {event.removed or '[]'}")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def _add_run_flags(p: _Parser, require_dataset: bool = True) -> None:
    p.add_argument("--dataset", required=require_dataset)
    p.add_argument("--format", choices=datasets.FORMATS, required=require_dataset)
    p.add_argument("--method", choices=[m.value for m in Method], default=None)
    p.add_argument("--backend", choices=["http", "mock"], default="mock")
    p.add_argument("--config", default=None, help="JSON config mirroring the run settings")
    p.add_argument("--out", required=True)
    p.add_argument("--mock-script", default=None)
    p.add_argument("--base-url", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--token-env", default="FNBOX_API_TOKEN")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None, help="samples per mode")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--demos", default=None, help="demo fixture override file")
    p.add_argument("--visual-fixture", default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="fnbox", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="stream a dataset and induce a toolbox")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate-order", help="re-run under shuffled or post-hoc orderings")
    _add_run_flags(p)
    p.add_argument("--mode", choices=["shuffle", "posthoc"], required=True)
    p.add_argument("--seeds", default=None, help="comma-separated shuffle seeds")
    p.add_argument("--records", default=None, help="prior run records for posthoc")
    p.set_defaults(func=cmd_ablate_order)

    p = sub.add_parser("ablate-no-trim", help="run with trimming disabled")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate_no_trim)

    p = sub.add_parser("score", help="recompute metrics from records offline")
    p.add_argument("--records", required=True)
    p.add_argument("--gold", required=True, help="dataset file with gold answers")
    p.add_argument("--format", choices=datasets.FORMATS, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export-verify", help="sample a blinded verification session")
    p.add_argument("--records", nargs="+", required=True,
                   help="records JSONL files, optionally method=path")
    p.add_argument("--toolbox", nargs="*", default=None,
                   help="toolbox JSON files, optionally method=path")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=datasets.FORMATS, required=True)
    p.add_argument("--sample", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_verify)

    p = sub.add_parser("verify-stats", help="aggregate verification judgments")
    p.add_argument("--judgments", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_verify_stats)

    p = sub.add_parser("serve-verify", help="serve a verification session over HTTP")
    p.add_argument("--session", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--judgments", default=None)
    p.add_argument("--ui-dir", default=None)
    p.set_defaults(func=cmd_serve_verify)

    p = sub.add_parser("toolbox", help="toolbox utilities")
    tb_sub = p.add_subparsers(dest="toolbox_command", required=True)
    show = tb_sub.add_parser("show", help="list induced functions and usage")
    show.add_argument("file")
    show.set_defaults(func=cmd_toolbox_show)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # runtime failure
        log.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
