"""Sandboxed program executor speaking newline-delimited JSON over stdio.

Protocol: one JSON request object per stdin line, one JSON response per
stdout line, matched by ``id``. Two request kinds:

  {"id", "op": "execute", "code", "env": {"kind", "inline", "path"},
   "answer_var", "timeout_ms", "limits": {"memory_mb", "cpu_s"}}
    -> {"id", "status", "value", "value_type", "stderr", "wall_ms"}

  {"id", "op": "parse", "code"}
    -> {"id", "status", "depths"}

``status`` is one of ok / runtime-error / timeout / parse-error; faults are
always reported as status values, never as protocol failures.

Each execute request forks a fresh child process. The child binds the task
environment (inline tables become a pandas DataFrame named ``df``; CSV and
hierarchical table paths are exposed as ``table_path``; images as
``image_path`` with stubbed visual primitives), applies CPU / address-space /
file-size rlimits, blocks network module imports, jails the working directory
to the environment file's directory, runs the code, and reports the value
bound to ``answer_var`` (or the last top-level expression) back over a pipe.
A hung child is SIGKILLed at the deadline; a crashed child only fails its own
request, the worker loop keeps serving.
"""

from __future__ import annotations

import argparse
import ast
import io
import json
import os
import resource
import select
import signal
import sys
import tempfile
import time
import traceback

DEFAULT_MEMORY_MB = 2048
DEFAULT_TIMEOUT_MS = 10_000
LAST_EXPR_NAME = "_last_expr_value_"

# Modules whose import would open a network surface. Poisoning sys.modules
# with None makes `import X` raise ImportError inside the child.
BLOCKED_MODULES = ("socket", "_socket", "ssl", "_ssl")

_visual_fixture: dict | None = None


# ---------------------------------------------------------------------------
# Statement depth metric
# ---------------------------------------------------------------------------

def node_depth(node: ast.AST) -> int:
    """Depth of a syntax tree: leaves count 1, every child node counts."""
    depths = [node_depth(child) for child in ast.iter_child_nodes(node)]
    return 1 + max(depths) if depths else 1


def statement_depths(code: str) -> list[int]:
    """Per top-level statement tree depth; raises SyntaxError on bad code."""
    tree = ast.parse(code)
    return [node_depth(stmt) for stmt in tree.body]


# ---------------------------------------------------------------------------
# Value normalization
# ---------------------------------------------------------------------------

def normalize_value(value):
    """Reduce an arbitrary answer object to (kind, json-safe value).

    bools render as text ("True"/"False"), ints and floats stay numeric,
    numpy-style scalars are unwrapped via .item(), everything else is str()d.
    """
    if isinstance(value, bool):
        return "text", str(value)
    if isinstance(value, (int, float)):
        return "number", value
    if isinstance(value, str):
        return "text", value
    if hasattr(value, "item"):
        try:
            return normalize_value(value.item())
        except Exception:
            pass
    return "text", str(value)


# ---------------------------------------------------------------------------
# Environment bindings
# ---------------------------------------------------------------------------

def _ensure_pandas():
    # Imported in the parent so forked children inherit the loaded module
    # (a fresh pandas import inside a network-poisoned child could fail).
    import pandas

    return pandas


def parse_table(path: str):
    """Load a hierarchical table file into a flat DataFrame.

    Expects JSON: {"title"?, "header_rows": [[...], ...], "rows": [[...]]}.
    Stacked header rows are joined per column with " / ".
    """
    pd = _ensure_pandas()
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    header_rows = spec["header_rows"]
    columns = [
        " / ".join(str(level[i]) for level in header_rows)
        for i in range(len(header_rows[0]))
    ]
    return pd.DataFrame(spec["rows"], columns=columns)


def _make_visual_primitives(fixture: dict):
    """Build the stubbed visual primitives from a canned-answer fixture.

    Images are opaque string tokens (the file's basename, extended by crop
    coordinates), so fixture keys stay path-independent.
    """

    def load_image(path):
        return os.path.basename(str(path))

    def visual_qa(image, question):
        key = f"{image}|{question}"
        try:
            return fixture["visual_qa"][key]
        except KeyError:
            raise KeyError(f"no visual_qa fixture entry for {key!r}")

    def locate_objects(image, object_name):
        key = f"{image}|{object_name}"
        try:
            return fixture["locate_objects"][key]
        except KeyError:
            raise KeyError(f"no locate_objects fixture entry for {key!r}")

    def crop_region(image, box):
        coords = ",".join(str(int(c)) for c in box)
        return f"{image}#{coords}"

    return {
        "load_image": load_image,
        "visual_qa": visual_qa,
        "locate_objects": locate_objects,
        "crop_region": crop_region,
    }


def _bind_environment(env: dict) -> tuple[dict, str]:
    """Return (extra globals, jail directory) for an environment spec."""
    kind = env.get("kind", "none")
    path = env.get("path")
    if kind == "none":
        return {}, tempfile.gettempdir()
    if kind == "table-inline":
        pd = _ensure_pandas()
        spec = json.loads(env["inline"])
        df = pd.DataFrame(spec["rows"], columns=spec["header"])
        return {"df": df}, tempfile.gettempdir()
    if kind == "table-csv-file":
        _ensure_pandas()
        full = os.path.abspath(path)
        return {"table_path": full}, os.path.dirname(full)
    if kind == "table-hierarchical-file":
        _ensure_pandas()
        full = os.path.abspath(path)
        return {"table_path": full, "parse_table": parse_table}, os.path.dirname(full)
    if kind == "image-file":
        if _visual_fixture is None:
            raise RuntimeError("worker started without --visual-fixture")
        full = os.path.abspath(path)
        bindings = {"image_path": full}
        bindings.update(_make_visual_primitives(_visual_fixture))
        return bindings, os.path.dirname(full)
    raise ValueError(f"unknown environment kind {kind!r}")


# ---------------------------------------------------------------------------
# Child process
# ---------------------------------------------------------------------------

def _apply_limits(limits: dict, timeout_ms: int) -> None:
    cpu_s = int(limits.get("cpu_s") or (timeout_ms // 1000 + 2))
    mem = int(limits.get("memory_mb") or DEFAULT_MEMORY_MB) * 1024 * 1024
    resource.setrlimit(resource.RLIMIT_CPU, (cpu_s, cpu_s + 1))
    resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
    # No file writes: regular-file size capped at 0 bytes (pipes unaffected).
    resource.setrlimit(resource.RLIMIT_FSIZE, (0, 0))


def _block_network() -> None:
    for name in BLOCKED_MODULES:
        if name not in sys.modules:
            sys.modules[name] = None  # type: ignore[assignment]


def _rewrite_last_expressions(tree: ast.Module) -> ast.Module:
    # Capture top-level expression-statement values so the last one can
    # serve as the answer when no answer variable was bound.
    new_body: list[ast.stmt] = []
    for stmt in tree.body:
        if isinstance(stmt, ast.Expr):
            target = ast.Name(id=LAST_EXPR_NAME, ctx=ast.Store())
            stmt = ast.Assign(targets=[target], value=stmt.value)
        new_body.append(stmt)
    tree.body = new_body
    return ast.fix_missing_locations(tree)


def _child_run(request: dict, write_fd: int) -> None:
    """Execute one request inside the forked child. Never returns."""
    result = {"status": "runtime-error", "value": None, "value_type": None, "stderr": ""}
    try:
        code = request.get("code", "")
        answer_var = request.get("answer_var") or "ans"
        bindings, jail = _bind_environment(request.get("env") or {"kind": "none"})

        # Detach from the worker's stdio so user prints cannot corrupt the
        # protocol; Python-level stderr is captured for diagnostics.
        devnull = os.open(os.devnull, os.O_RDWR)
        os.dup2(devnull, 0)
        os.dup2(devnull, 1)
        os.dup2(devnull, 2)
        captured = io.StringIO()
        sys.stdout = io.StringIO()
        sys.stderr = captured

        # A blocked over-limit write should raise EFBIG, not kill the child.
        signal.signal(signal.SIGXFSZ, signal.SIG_IGN)
        os.chdir(jail)
        _apply_limits(request.get("limits") or {}, int(request.get("timeout_ms") or DEFAULT_TIMEOUT_MS))
        _block_network()

        try:
            tree = ast.parse(code)
        except (SyntaxError, ValueError) as exc:
            result["status"] = "parse-error"
            result["stderr"] = f"{type(exc).__name__}: {exc}"
        else:
            tree = _rewrite_last_expressions(tree)
            namespace: dict = {"__name__": "__main__"}
            namespace.update(bindings)
            try:
                exec(compile(tree, "<solution>", "exec"), namespace)
            except BaseException:
                result["status"] = "runtime-error"
                result["stderr"] = (captured.getvalue() + traceback.format_exc()).strip()
            else:
                if answer_var in namespace:
                    answer = namespace[answer_var]
                elif LAST_EXPR_NAME in namespace:
                    answer = namespace[LAST_EXPR_NAME]
                else:
                    answer = None
                    result["status"] = "runtime-error"
                    result["stderr"] = "no answer produced"
                if result["stderr"] != "no answer produced":
                    kind, value = normalize_value(answer)
                    result.update(status="ok", value=value, value_type=kind, stderr="")
    except BaseException:
        result["stderr"] = traceback.format_exc().strip()
    try:
        os.write(write_fd, json.dumps(result).encode("utf-8"))
        os.close(write_fd)
    finally:
        os._exit(0)


# ---------------------------------------------------------------------------
# Parent-side request handling
# ---------------------------------------------------------------------------

def _read_all_with_deadline(fd: int, deadline: float) -> bytes | None:
    """Drain a pipe until EOF or deadline; None signals a timeout."""
    chunks = []
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        ready, _, _ = select.select([fd], [], [], remaining)
        if not ready:
            return None
        chunk = os.read(fd, 65536)
        if not chunk:
            return b"".join(chunks)
        chunks.append(chunk)


def handle_execute(request: dict) -> dict:
    timeout_ms = int(request.get("timeout_ms") or DEFAULT_TIMEOUT_MS)
    env_kind = (request.get("env") or {}).get("kind", "none")
    if env_kind.startswith("table"):
        _ensure_pandas()  # pay the import once, pre-fork

    start = time.monotonic()
    read_fd, write_fd = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(read_fd)
        _child_run(request, write_fd)
        os._exit(0)  # unreachable

    os.close(write_fd)
    payload = _read_all_with_deadline(read_fd, start + timeout_ms / 1000.0)
    os.close(read_fd)
    if payload is None:
        os.kill(pid, signal.SIGKILL)
        os.waitpid(pid, 0)
        wall_ms = int((time.monotonic() - start) * 1000)
        return {
            "status": "timeout",
            "value": None,
            "value_type": None,
            "stderr": f"killed after {timeout_ms} ms",
            "wall_ms": wall_ms,
        }
    _, exit_status = os.waitpid(pid, 0)
    wall_ms = int((time.monotonic() - start) * 1000)
    if not payload:
        detail = f"child died without result (wait status {exit_status})"
        return {"status": "runtime-error", "value": None, "value_type": None,
                "stderr": detail, "wall_ms": wall_ms}
    result = json.loads(payload.decode("utf-8"))
    result["wall_ms"] = wall_ms
    return result


def handle_parse(request: dict) -> dict:
    try:
        depths = statement_depths(request.get("code", ""))
    except (SyntaxError, ValueError) as exc:
        return {"status": "parse-error", "depths": None, "stderr": f"{type(exc).__name__}: {exc}"}
    return {"status": "ok", "depths": depths, "stderr": ""}


def serve(stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            response = {"id": None, "status": "runtime-error", "stderr": f"bad request line: {exc}"}
        else:
            op = request.get("op")
            if op == "execute":
                response = handle_execute(request)
            elif op == "parse":
                response = handle_parse(request)
            else:
                response = {"status": "runtime-error", "stderr": f"unknown op {op!r}"}
            response["id"] = request.get("id")
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()


def main(argv: list[str] | None = None) -> int:
    global _visual_fixture
    parser = argparse.ArgumentParser(prog="sandbox_worker")
    parser.add_argument("--visual-fixture", default=None,
                        help="JSON file of canned visual-primitive answers")
    args = parser.parse_args(argv)
    if args.visual_fixture:
        with open(args.visual_fixture, "r", encoding="utf-8") as fh:
            _visual_fixture = json.load(fh)
    signal.signal(signal.SIGPIPE, signal.SIG_DFL)
    serve()
    return 0


if __name__ == "__main__":
    sys.exit(main())
