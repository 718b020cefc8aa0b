"""Correctness evaluation, flip-set construction, pass@k, checkpoint selection.

A query is scored by greedy-decoding its prompt and reading the single symbol
after the answer marker; anything malformed (no marker, marker at the end)
scores 0. Flip sets compare a base and a fine-tuned checkpoint over the same
validation queries: C collects queries the tuned model newly gets right, I the
queries it newly gets wrong, and each member records the tuned model's greedy
completion so downstream gradient code sees exactly the behavior that defined
membership.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

from .datagen import ANSWER_ID, Example, digit_token
from .errors import InputError
from .model import Checkpoint, decode_batch

log = logging.getLogger(__name__)


@dataclass
class FlipRecord:
    query_id: int
    prompt_tokens: list[int]
    completion_tokens: list[int]   # tuned model's greedy decode
    gold_answer: str


@dataclass
class FlipSets:
    C: list[FlipRecord] = field(default_factory=list)   # newly correct
    I: list[FlipRecord] = field(default_factory=list)   # newly incorrect
    flags: list[dict] = field(default_factory=list)     # per-query before/after

    def __post_init__(self):
        c_ids = {r.query_id for r in self.C}
        i_ids = {r.query_id for r in self.I}
        if c_ids & i_ids:
            raise InputError(f"flip sets overlap on query ids {sorted(c_ids & i_ids)}")


def extract_answer(completion_tokens) -> int | None:
    """Token id of the first symbol after the first answer marker, else None."""
    toks = list(completion_tokens)
    if ANSWER_ID not in toks:
        return None
    i = toks.index(ANSWER_ID)
    if i + 1 >= len(toks):
        return None
    return int(toks[i + 1])


def _is_correct(completion_tokens, gold_answer: str) -> int:
    got = extract_answer(completion_tokens)
    return int(got is not None and got == digit_token(int(gold_answer)))


def accuracy_flag(ckpt: Checkpoint, query: Example) -> int:
    """1 iff the greedy completion's extracted answer equals gold_answer."""
    completion = decode_batch(ckpt, [query.prompt_tokens], mode="greedy")[0]
    return _is_correct(completion, query.gold_answer)


def accuracy_flags(ckpt: Checkpoint, queries) -> list[int]:
    """Batched accuracy_flag over many queries (same semantics)."""
    if not queries:
        raise InputError("empty query set")
    comps = decode_batch(ckpt, [q.prompt_tokens for q in queries], mode="greedy")
    return [_is_correct(c, q.gold_answer) for q, c in zip(queries, comps)]


def flips_from_flags(before, after):
    """(C indices, I indices) from per-query 0/1 accuracy vectors."""
    if len(before) != len(after):
        raise InputError("before/after accuracy vectors differ in length")
    c_idx = [i for i, (b, a) in enumerate(zip(before, after)) if b == 0 and a == 1]
    i_idx = [i for i, (b, a) in enumerate(zip(before, after)) if b == 1 and a == 0]
    return c_idx, i_idx


def build_flip_sets(base: Checkpoint, tuned: Checkpoint, V) -> FlipSets:
    """Disjoint improved/degraded query sets with the tuned greedy decodes."""
    if not V:
        raise InputError("empty validation set")
    if base.config != tuned.config:
        raise InputError("base and tuned checkpoints must share a config")
    before = accuracy_flags(base, V)
    after_comps = decode_batch(tuned, [q.prompt_tokens for q in V], mode="greedy")
    after = [_is_correct(c, q.gold_answer) for q, c in zip(V, after_comps)]
    c_idx, i_idx = flips_from_flags(before, after)
    if not i_idx:
        log.warning("no queries degraded by fine-tuning; harmful-side strategies "
                    "will be skipped")
    if not c_idx:
        log.warning("no queries improved by fine-tuning; beneficial-side "
                    "strategies will be skipped")

    def rec(i):
        return FlipRecord(V[i].id, list(V[i].prompt_tokens),
                          list(after_comps[i]), V[i].gold_answer)

    flags = [{"query_id": V[i].id, "before": int(before[i]), "after": int(after[i])}
             for i in range(len(V))]
    return FlipSets(C=[rec(i) for i in c_idx], I=[rec(i) for i in i_idx], flags=flags)


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased probability that at least one of k samples out of n is correct.

    1 - C(n-c, k) / C(n, k); reduces to c/n at k=1.
    """
    if n < 1 or not 0 <= c <= n:
        raise InputError(f"need 0 <= c <= n with n >= 1, got n={n} c={c}")
    if not 1 <= k <= n:
        raise InputError(f"need 1 <= k <= n, got k={k} n={n}")
    if n - c < k:
        return 1.0
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


def select_best_checkpoint(series, val) -> Checkpoint:
    """Maximum mean greedy accuracy over val; ties go to the earliest epoch."""
    if not series:
        raise InputError("empty checkpoint series")
    if not val:
        raise InputError("empty validation set")
    best, best_acc = None, -1.0
    for ckpt in sorted(series, key=lambda c: c.epoch):
        a = sum(accuracy_flags(ckpt, val)) / len(val)
        if a > best_acc:
            best, best_acc = ckpt, a
    return best


# --- JSON serialization ---------------------------------------------------------

def flipsets_to_json(flips: FlipSets) -> dict:
    def recs(rows):
        return [{"query_id": r.query_id, "prompt_tokens": r.prompt_tokens,
                 "completion_tokens": r.completion_tokens,
                 "gold_answer": r.gold_answer} for r in rows]
    return {"C": recs(flips.C), "I": recs(flips.I), "per_query": flips.flags}


def flipsets_from_json(doc: dict) -> FlipSets:
    def recs(rows):
        return [FlipRecord(int(r["query_id"]), [int(t) for t in r["prompt_tokens"]],
                           [int(t) for t in r["completion_tokens"]],
                           str(r["gold_answer"])) for r in rows]
    return FlipSets(C=recs(doc["C"]), I=recs(doc["I"]),
                    flags=list(doc.get("per_query", [])))


def save_flipsets(path, flips: FlipSets) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(flipsets_to_json(flips), f, sort_keys=True, separators=(",", ":"))


def load_flipsets(path) -> FlipSets:
    with open(path, "r", encoding="utf-8") as f:
        return flipsets_from_json(json.load(f))
