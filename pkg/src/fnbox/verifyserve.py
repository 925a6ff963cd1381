"""Verification-session bundles and the HTTP server behind the study UI.

A session bundle freezes: a seeded sample of examples, one item per (example,
method) with the solution to judge, blinded method labels, and server-side
ground truth. The server exposes the bundle (truth stripped), accepts
append-only judgments with per-verifier dedupe, and exports a verifier's
judgment lines byte-for-byte.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .datasets import serialize_environment
from .model import Example

log = logging.getLogger(__name__)

BLIND_LABELS = "ABCDEFGHJK"


def _splitmix64(seed: int):
    state = seed & 0xFFFFFFFFFFFFFFFF

    def next_u64() -> int:
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        return z ^ (z >> 31)

    return next_u64


def _shuffled(items: list, seed: int) -> list:
    items = list(items)
    rng = _splitmix64(seed)
    for i in range(len(items) - 1, 0, -1):
        j = rng() % (i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def build_verify_bundle(records_by_method: dict[str, list[dict]],
                        examples: list[Example], sample_size: int, seed: int,
                        sources_by_method: dict[str, dict[str, str]] | None = None) -> dict:
    """Assemble a blinded verification session.

    ``records_by_method`` maps a method name to its run's record rows.
    Examples present in every run are sampled deterministically from the seed;
    methods get shuffled single-letter labels so the UI cannot reveal which
    pipeline produced a solution. ``sources_by_method`` optionally provides
    function sources (name -> source) to display alongside solutions.
    """
    sources_by_method = sources_by_method or {}
    by_id = {ex.id: ex for ex in examples}
    rows_by_method = {
        method: {row["example_id"]: row for row in rows}
        for method, rows in records_by_method.items()
    }
    eligible = sorted(
        ex_id for ex_id in by_id
        if all(ex_id in rows for rows in rows_by_method.values())
    )
    if not eligible:
        raise ValueError("no example is covered by every records file")
    sampled = _shuffled(eligible, seed)[:sample_size]

    methods = sorted(rows_by_method)
    labels = _shuffled(list(BLIND_LABELS[: len(methods)]), seed + 1)
    label_map = {label: method for label, method in zip(labels, methods)}

    items = []
    for ex_id in sampled:
        example = by_id[ex_id]
        env_text = serialize_environment(example.env)
        for label in labels:
            row = rows_by_method[label_map[label]][ex_id]
            functions = []
            source_map = sources_by_method.get(label_map[label], {})
            for name in row.get("used_functions", []):
                if name in source_map:
                    functions.append({"name": name, "source": source_map[name]})
            items.append({
                "item_id": f"{ex_id}:{label}",
                "example_id": ex_id,
                "method_label": label,
                "query": example.query,
                "env_text": env_text,
                "solution": row.get("solution", ""),
                "functions": functions,
                "answer": row.get("answer"),
                "truth_correct": bool(row.get("correct")),
            })
    return {"schema": 1, "seed": seed, "label_map": label_map, "items": items}


def public_session(bundle: dict) -> dict:
    """The bundle as served to verifiers: no ground truth, no label map."""
    items = [{k: v for k, v in item.items() if k != "truth_correct"}
             for item in bundle["items"]]
    return {"schema": bundle["schema"], "items": items}


# ---------------------------------------------------------------------------
# HTTP server
# ---------------------------------------------------------------------------

class JudgmentStore:
    """Append-only JSONL store with (verifier, example, label) dedupe."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._seen: set[tuple[str, str, str]] = set()
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    row = json.loads(line)
                    self._seen.add(self._key(row))

    @staticmethod
    def _key(row: dict) -> tuple[str, str, str]:
        return (str(row["verifier_id"]), str(row["example_id"]), str(row["method_label"]))

    def append(self, row: dict) -> bool:
        """Store one judgment; False means a duplicate was rejected."""
        key = self._key(row)
        with self._lock:
            if key in self._seen:
                return False
            self._seen.add(key)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
        return True

    def lines_for(self, verifier_id: str) -> list[str]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if line.strip() and json.loads(line).get("verifier_id") == verifier_id:
                out.append(line)
        return out


REQUIRED_JUDGMENT_FIELDS = ("verifier_id", "example_id", "method_label",
                            "judged_correct", "elapsed_ms")


def make_handler(bundle: dict, store: JudgmentStore, ui_dir: str | Path | None):
    session_payload = json.dumps(public_session(bundle)).encode("utf-8")
    valid_items = {(item["example_id"], item["method_label"]) for item in bundle["items"]}
    ui_root = Path(ui_dir) if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # quiet by default
            log.debug("http: " + fmt, *args)

        def _send(self, code: int, body: bytes, content_type: str) -> None:
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, code: int, payload: dict) -> None:
            self._send(code, json.dumps(payload).encode("utf-8"), "application/json")

        def do_GET(self):
            if self.path == "/session":
                self._send(200, session_payload, "application/json")
                return
            if self.path.startswith("/export/"):
                verifier_id = self.path[len("/export/"):]
                lines = store.lines_for(verifier_id)
                body = ("\n".join(lines) + "\n" if lines else "").encode("utf-8")
                self._send(200, body, "application/jsonl")
                return
            if ui_root is not None:
                rel = "index.html" if self.path in ("/", "") else self.path.lstrip("/")
                target = (ui_root / rel).resolve()
                if str(target).startswith(str(ui_root.resolve())) and target.is_file():
                    ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
                    self._send(200, target.read_bytes(), ctype)
                    return
            self._send_json(404, {"error": "not found"})

        def do_POST(self):
            if self.path != "/judgment":
                self._send_json(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                row = json.loads(self.rfile.read(length))
            except json.JSONDecodeError:
                self._send_json(400, {"error": "invalid JSON"})
                return
            missing = [f for f in REQUIRED_JUDGMENT_FIELDS if f not in row]
            if missing:
                self._send_json(400, {"error": f"missing fields: {missing}"})
                return
            if (row["example_id"], row["method_label"]) not in valid_items:
                self._send_json(400, {"error": "unknown item"})
                return
            stored = store.append({f: row[f] for f in REQUIRED_JUDGMENT_FIELDS})
            if not stored:
                self._send_json(409, {"error": "duplicate judgment"})
                return
            self._send_json(200, {"ok": True})

    return Handler


def serve_session(bundle: dict, judgments_path: str | Path, port: int,
                  ui_dir: str | Path | None = None) -> ThreadingHTTPServer:
    """Start the verification server; caller owns shutdown."""
    store = JudgmentStore(judgments_path)
    handler = make_handler(bundle, store, ui_dir)
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    return server
