"""Extract programs from raw LM text and split them into functions + solution.

Responses are expected to carry fenced code blocks; modes that induce
functions (CREATE, INSTANCE) have their top-level ``def`` statements lifted
out as toolbox candidates while everything else stays in the solution body.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

from .model import Mode, ToolFunction, parse_tool_function

FENCE = "```"

# Modes whose responses may introduce new toolbox functions.
INDUCING_MODES = (Mode.CREATE, Mode.INSTANCE)


def extract_program(raw_text: str) -> str:
    """Pull the program out of an LM response.

    All fenced code blocks are concatenated in order (an unterminated final
    fence runs to the end of the text). Without fences, the longest suffix of
    the text that parses is returned; if nothing parses the program is empty.
    """
    blocks = _fenced_blocks(raw_text)
    if blocks:
        return "\n".join(block.strip("\n") for block in blocks)
    return _longest_parsing_suffix(raw_text)


def _fenced_blocks(text: str) -> list[str]:
    blocks: list[str] = []
    lines = text.splitlines()
    current: list[str] | None = None
    for line in lines:
        if line.lstrip().startswith(FENCE):
            if current is None:
                current = []
            else:
                blocks.append("\n".join(current))
                current = None
            continue
        if current is not None:
            current.append(line)
    if current:  # unterminated fence, e.g. truncated at max_tokens
        blocks.append("\n".join(current))
    return blocks


def _longest_parsing_suffix(text: str) -> str:
    lines = text.splitlines()
    for start in range(len(lines)):
        candidate = "\n".join(lines[start:]).strip("\n")
        if not candidate.strip():
            continue
        try:
            ast.parse(candidate)
        except (SyntaxError, ValueError):
            continue
        return candidate
    return ""


@dataclass
class SplitResult:
    """Outcome of separating induced functions from the solution body."""

    functions: list[ToolFunction] = field(default_factory=list)
    solution: str = ""
    parse_error: bool = False


def split_function_solution(code: str, mode: Mode) -> SplitResult:
    """Split ``code`` into induced functions and the remaining solution.

    Only CREATE and INSTANCE responses induce functions; in every other mode
    definitions stay inline and the code passes through untouched. Import
    statements are top-level non-def statements, so they stay in the solution
    and run before any lifted function is called.
    """
    if mode not in INDUCING_MODES:
        return SplitResult(solution=code)
    try:
        tree = ast.parse(code)
    except (SyntaxError, ValueError):
        return SplitResult(solution=code, parse_error=True)

    functions: list[ToolFunction] = []
    remainder: list[str] = []
    for node in tree.body:
        segment = ast.get_source_segment(code, node) or ast.unparse(node)
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            functions.append(parse_tool_function(segment))
        else:
            remainder.append(segment)
    return SplitResult(functions=functions, solution="\n".join(remainder))


def called_names(code: str) -> set[str]:
    """Names invoked as plain call expressions, e.g. ``f(...)`` but not ``o.f(...)``."""
    try:
        tree = ast.parse(code)
    except (SyntaxError, ValueError):
        return set()
    names: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            names.add(node.func.id)
    return names


def find_used_functions(solution: str, toolbox_names: set[str] | list[str],
                        new_functions: list[ToolFunction] | None = None) -> set[str]:
    """Toolbox or newly induced function names called in the solution body.

    Detection is static: a name mentioned only in a string literal, or passed
    without being called, does not count.
    """
    known = set(toolbox_names)
    known.update(f.name for f in (new_functions or []))
    return called_names(solution) & known
