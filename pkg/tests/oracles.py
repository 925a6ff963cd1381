"""Independent reference implementations used to cross-check the engine.

Everything here is written from the selection/ordering rules directly, by
enumeration, and must stay independent of the production code paths it
checks (only plain data goes in and out).
"""

from __future__ import annotations

import math


def brute_force_select(candidates: list[dict]) -> int | None:
    """Reference selector over plain candidate dicts.

    Each candidate: {"index": int, "ok": bool, "answer": hashable or None,
    "ops": int or None}. Returns the winning index or None.
    Rules, enumerated independently: keep ok candidates; count, for every
    candidate, how many ok candidates share its answer; keep those with the
    maximal share; among them keep the minimal ops (None treated as +inf);
    among those return the smallest index.
    """
    ok = [c for c in candidates if c["ok"]]
    if not ok:
        return None
    freqs = {}
    for cand in ok:
        count = 0
        for other in ok:
            if other["answer"] == cand["answer"]:
                count += 1
        freqs[cand["index"]] = count
    top = max(freqs.values())
    pool = [c for c in ok if freqs[c["index"]] == top]
    best_ops = min(c["ops"] if c["ops"] is not None else math.inf for c in pool)
    pool = [c for c in pool
            if (c["ops"] if c["ops"] is not None else math.inf) == best_ops]
    return min(c["index"] for c in pool)


def reference_posthoc(records: list[tuple[str, set[str]]],
                      original_order: list[str]) -> list[str]:
    """Reference of the post-hoc clustering rule over (example_id, used) pairs."""
    # usage frequency: number of records using the function
    freq: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for pos, (_, used) in enumerate(records):
        for name in used:
            freq[name] = freq.get(name, 0) + 1
            if name not in first_seen:
                first_seen[name] = pos
    ranked = sorted(freq, key=lambda n: (-freq[n], first_seen[n], n))

    position = {ex: i for i, ex in enumerate(original_order)}
    clusters: dict[str, list[str]] = {name: [] for name in ranked}
    trailing: list[str] = []
    for ex_id, used in records:
        if not used:
            trailing.append(ex_id)
            continue
        # the example's cluster is the LAST of its functions in ranked order
        last = max(used, key=lambda n: ranked.index(n))
        clusters[last].append(ex_id)
    ordered: list[str] = []
    for name in ranked:
        ordered.extend(sorted(clusters[name], key=position.get))
    ordered.extend(sorted(trailing, key=position.get))
    return ordered


def reference_splitmix64(seed: int):
    """SplitMix64 written out from the published constants."""
    state = seed % 2**64

    def next_u64() -> int:
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) % 2**64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        return z ^ (z >> 31)

    return next_u64


def reference_shuffle(ids: list[str], seed: int) -> list[str]:
    ids = list(ids)
    rng = reference_splitmix64(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = rng() % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return ids
