"""Regenerate the frozen op-count reference corpus.

Depths come from the sandbox worker's parser (the native implementation of
the depth convention), so the corpus pins the metric independently of the
engine-side implementation. Run from the repo root:

    python scripts/freeze_op_corpus.py
"""

import json
import subprocess
import sys
from pathlib import Path

PROGRAMS = [
    "",
    "x = 1",
    "x = 1\nx = 1",
    "ans = 2 + 3",
    "ans = add_nums(2, 3)",
    "ans = f(g(h(x)))",
    "import math",
    "import pandas as pd",
    "from math import sqrt",
    "def f(a):\n    return a + 1",
    "if x > 0:\n    y = 1\nelse:\n    y = 2",
    "for i in range(10):\n    total = total + i",
    "ans = [i * i for i in range(5)]",
    "ans = df[df['year'] == 2016]['value'].values[0]",
    "x = 1\ny = f(x)\nans = y + 2",
    "ans = (a + b) * (c - d) / e",
    "while n > 1:\n    n = n // 2\n    steps = steps + 1",
    "ans = 'hello'.upper()",
    "ans = {'a': 1, 'b': [2, 3]}",
    "print(f(2))",
    "ans = max(min(a, b), abs(c))",
    "try:\n    ans = risky()\nexcept ValueError:\n    ans = 0",
    # Abstraction pair: a composed-function call vs its inlined equivalent.
    "ans = calc_rate_of_change(df, 2015, 2016)",
    (
        "row_old = df[df['year'] == 2015]\n"
        "row_new = df[df['year'] == 2016]\n"
        "old = row_old['value'].values[0]\n"
        "new = row_new['value'].values[0]\n"
        "ans = (new - old) / old"
    ),
]


def main() -> int:
    worker = subprocess.Popen(
        [sys.executable, "-u", "-m", "sandbox_worker"],
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
    )
    entries = []
    for i, program in enumerate(PROGRAMS):
        worker.stdin.write(json.dumps({"id": i, "op": "parse", "code": program}) + "\n")
        worker.stdin.flush()
        response = json.loads(worker.stdout.readline())
        assert response["status"] == "ok", (program, response)
        entries.append({"program": program, "expected_op_count": sum(response["depths"])})
    worker.stdin.close()
    worker.wait()

    out = Path(__file__).resolve().parent.parent / "src" / "fnbox" / "corpus" / "op_count_corpus.json"
    out.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(entries)} programs to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
