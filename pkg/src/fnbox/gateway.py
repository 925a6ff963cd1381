"""Prompt construction and LM sampling against a pluggable backend.

Prompts have four parts: a per-task instruction (shipped as editable template
files), the primitive-function listing, demonstration pairs, and the current
query with its serialized environment. IMPORT and CREATE prompts additionally
render the toolbox; SKIP, PRIMITIVE, and INSTANCE prompts never do.

Backends are an OpenAI-compatible chat-completions endpoint or a scripted
mock keyed by (example_id, mode, sample_index). The gateway holds no mutable
state beyond the backend handle and is safe for concurrent use.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import requests

from .datasets import Primitive, primitive_registry, serialize_environment
from .model import CandidateResponse, Example, Method, Mode, RunConfig, Toolbox

log = logging.getLogger(__name__)

TROVE_MODE_ORDER = (Mode.IMPORT, Mode.CREATE, Mode.SKIP)
RESOLVE_MODE_ORDER = (Mode.IMPORT, Mode.SKIP)

# Modes whose prompt renders the toolbox listing.
TOOLBOX_MODES = (Mode.IMPORT, Mode.CREATE)


class PromptError(Exception):
    """Prompt construction failed (missing demos, absent toolbox, ...)."""


class MockKeyError(Exception):
    """The scripted mock has no entry for a planned sample."""


class TransportError(Exception):
    """The HTTP backend failed after all retry attempts."""


@dataclass
class Decoding:
    temperature: float = 0.6
    top_p: float = 0.95
    max_tokens: int = 512

    @classmethod
    def from_config(cls, config: RunConfig) -> "Decoding":
        return cls(config.temperature, config.top_p, config.max_tokens)


@dataclass
class SampleContext:
    """Identifies which example/mode a batch of samples belongs to."""

    example_id: str
    mode: Mode


# ---------------------------------------------------------------------------
# Task resolution and instruction templates
# ---------------------------------------------------------------------------

_ENV_TO_TASK = {
    "none": "math",
    "table-inline": "table",
    "table-csv-file": "table",
    "table-hierarchical-file": "table",
    "image-file": "visual",
}

_ENV_TO_FORMAT = {
    "none": "math-json",
    "table-inline": "table-inline-json",
    "table-csv-file": "table-csv-dir",
    "table-hierarchical-file": "table-hier-json",
    "image-file": "visual-json",
}

_ENV_TO_DEMO_KEY = {
    "none": "math",
    "table-inline": "table_inline",
    "table-csv-file": "table_csv",
    "table-hierarchical-file": "table_hier",
    "image-file": "visual",
}


def task_for_example(example: Example) -> str:
    return _ENV_TO_TASK[example.env.kind]


def load_instruction(task: str, mode: Mode, template_dir: str | Path | None = None) -> str:
    name = f"{mode.value.lower()}.txt"
    if template_dir is not None:
        return (Path(template_dir) / task / name).read_text(encoding="utf-8").strip()
    ref = resources.files("fnbox").joinpath("prompts", task, name)
    return ref.read_text(encoding="utf-8").strip()


# ---------------------------------------------------------------------------
# Demo bank
# ---------------------------------------------------------------------------

@dataclass
class Demo:
    query: str
    env_text: str
    flat_solution: str
    functions: list[str]
    tool_solution: str


class DemoBank:
    """Demonstration pairs per task family, loaded from fixture files."""

    def __init__(self, demos: dict[str, list[Demo]]):
        self._demos = demos

    @classmethod
    def default(cls) -> "DemoBank":
        demos: dict[str, list[Demo]] = {}
        for key in ("math", "table_inline", "table_csv", "table_hier", "visual"):
            ref = resources.files("fnbox").joinpath("demos", f"{key}.json")
            demos[key] = [Demo(**entry) for entry in json.loads(ref.read_text(encoding="utf-8"))]
        return cls(demos)

    @classmethod
    def from_file(cls, path: str | Path, key: str) -> "DemoBank":
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({key: [Demo(**entry) for entry in entries]})

    def demos_for(self, example: Example, mode: Mode, count: int) -> list[str]:
        key = _ENV_TO_DEMO_KEY[example.env.kind]
        available = self._demos.get(key, [])
        if len(available) < count:
            raise PromptError(
                f"demo bank has {len(available)} demos for {key!r}, need {count}"
            )
        return [_render_demo(demo, mode, i + 1) for i, demo in enumerate(available[:count])]


def _render_demo(demo: Demo, mode: Mode, index: int) -> str:
    if mode in (Mode.SKIP, Mode.PRIMITIVE):
        code = demo.flat_solution
    else:
        # Dual format: induced function(s) first, then the solution using them.
        code = "\n\n".join(demo.functions + [demo.tool_solution])
    parts = [f"### Example {index}", f"Question: {demo.query}"]
    if demo.env_text:
        parts.append(demo.env_text)
    parts.append("Solution:\n```python\n" + code + "\n```")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Prompt building
# ---------------------------------------------------------------------------

@dataclass
class PromptSpec:
    """The four prompt components, kept separate until rendering."""

    instruction: str
    primitives_section: str
    toolbox_section: str | None
    demos: list[str]
    query_block: str

    def render(self) -> str:
        parts = [self.instruction, "", "## Primitive Functions", self.primitives_section]
        if self.toolbox_section is not None:
            parts += ["", "## Toolbox", self.toolbox_section]
        parts += ["", "## Examples"]
        for demo in self.demos:
            parts += ["", demo]
        parts += ["", "## Now solve this question", self.query_block]
        return "\n".join(parts).rstrip() + "\n"


def _render_primitives(primitives: list[Primitive]) -> str:
    if not primitives:
        return "Python built-in functions are available."
    lines = []
    for prim in primitives:
        lines.append(prim.signature)
        lines.append(f"    {prim.docstring}")
    return "\n".join(lines)


def _render_toolbox(toolbox: Toolbox) -> str:
    lines = []
    for fn in toolbox:
        lines.append(fn.signature)
        if fn.docstring:
            lines.append(f"    {fn.docstring}")
    return "\n".join(lines)


def build_prompt(mode: Mode, config: RunConfig, toolbox: Toolbox | None,
                 example: Example, demo_bank: DemoBank,
                 template_dir: str | Path | None = None) -> PromptSpec:
    """Assemble the prompt for one (mode, example) pair. Deterministic."""
    if mode in TOOLBOX_MODES and toolbox is None:
        raise PromptError(f"{mode.value} prompt requires a toolbox")
    task = task_for_example(example)
    instruction = load_instruction(task, mode, template_dir)
    primitives = primitive_registry(_ENV_TO_FORMAT[example.env.kind])
    toolbox_section = _render_toolbox(toolbox) if mode in TOOLBOX_MODES else None
    demos = demo_bank.demos_for(example, mode, config.demo_count)

    env_text = example.env.preview or serialize_environment(example.env)
    query_lines = [f"Question: {example.query}"]
    if env_text:
        query_lines.append(env_text)
    query_lines.append("Solution:")
    return PromptSpec(
        instruction=instruction,
        primitives_section=_render_primitives(primitives),
        toolbox_section=toolbox_section,
        demos=demos,
        query_block="\n".join(query_lines),
    )


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class ScriptedMockBackend:
    """Deterministic backend: a table (example_id, mode, sample_index) -> text.

    The table must be total over the planned run; a missing key is a
    configuration error, not silence.
    """

    def __init__(self, script: dict[str, str]):
        self.script = dict(script)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedMockBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @staticmethod
    def key(example_id: str, mode: Mode, sample_index: int) -> str:
        return f"{example_id}|{mode.value}|{sample_index}"

    def sample(self, prompt: str, k: int, decoding: Decoding,
               context: SampleContext) -> list[str]:
        del prompt, decoding
        texts = []
        for i in range(k):
            key = self.key(context.example_id, context.mode, i)
            if key not in self.script:
                raise MockKeyError(f"mock script has no entry for key {key!r}")
            texts.append(self.script[key])
        return texts


class HttpBackend:
    """OpenAI-compatible chat-completions client with retry and n-sampling."""

    def __init__(self, base_url: str, model: str, token_env: str = "FNBOX_API_TOKEN",
                 timeout_s: float = 120.0, retries: int = 3):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.token_env = token_env
        self.timeout_s = timeout_s
        self.retries = retries

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def sample(self, prompt: str, k: int, decoding: Decoding,
               context: SampleContext) -> list[str]:
        del context
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "n": k,
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "max_tokens": decoding.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                response = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers=self._headers(),
                    timeout=self.timeout_s,
                )
                response.raise_for_status()
                data = response.json()
                choices = sorted(data["choices"], key=lambda c: c.get("index", 0))
                texts = [c["message"]["content"] or "" for c in choices]
                if len(texts) != k:
                    raise TransportError(f"asked for {k} completions, got {len(texts)}")
                return texts
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                wait = 0.5 * (2 ** attempt)
                log.warning("backend attempt %d/%d failed (%s); retrying in %.1fs",
                            attempt + 1, self.retries, exc, wait)
                time.sleep(wait)
        raise TransportError(f"backend failed after {self.retries} attempts: {last_error}")


class PromptCapture:
    """Backend wrapper that records every prompt it forwards (for audits)."""

    def __init__(self, backend):
        self.backend = backend
        self.captured: list[tuple[str, str, str]] = []  # (example_id, mode, prompt)

    def sample(self, prompt: str, k: int, decoding: Decoding,
               context: SampleContext) -> list[str]:
        self.captured.append((context.example_id, context.mode.value, prompt))
        return self.backend.sample(prompt, k, decoding, context)


def sample(backend, prompt: str, k: int, decoding: Decoding,
           context: SampleContext) -> list[str]:
    """Obtain exactly k sampled texts, in generation order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    texts = backend.sample(prompt, k, decoding, context)
    if len(texts) != k:
        raise TransportError(f"backend returned {len(texts)} texts, expected {k}")
    return texts


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------

def modes_for_method(method: Method, config: RunConfig | None = None) -> tuple[Mode, ...]:
    if method == Method.TROVE:
        return config.trove_modes() if config else TROVE_MODE_ORDER
    if method == Method.PRIMITIVE:
        return (Mode.PRIMITIVE,)
    return (Mode.INSTANCE,)


def generate_candidates(backend, config: RunConfig, toolbox: Toolbox,
                        example: Example, demo_bank: DemoBank,
                        modes: tuple[Mode, ...] | None = None,
                        template_dir: str | Path | None = None) -> list[CandidateResponse]:
    """Sample K responses per mode; global_index follows mode order.

    Candidates carry raw text only; parsing into functions and solution
    happens downstream.
    """
    modes = modes or modes_for_method(config.method, config)
    decoding = Decoding.from_config(config)
    candidates: list[CandidateResponse] = []
    for mode in modes:
        prompt = build_prompt(mode, config, toolbox, example, demo_bank, template_dir)
        context = SampleContext(example_id=example.id, mode=mode)
        texts = sample(backend, prompt.render(), config.k_samples, decoding, context)
        for i, text in enumerate(texts):
            candidates.append(CandidateResponse(
                mode=mode,
                sample_index=i,
                raw_text=text,
                global_index=len(candidates),
            ))
    return candidates
