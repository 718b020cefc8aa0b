"""Influence-based pruning strategies plus perplexity/embedding/random baselines.

The influence strategies prune by intersecting a score threshold with a rank
threshold. The published fractions (prune bottom 20% for the beneficial side,
top 10% for the harmful side, 10% for the combination) say nothing about how
to size the intersection, so the common quantile k is grown by binary search
from the budget until the intersection first reaches it, then the intersection
is trimmed in score order to land on the budget exactly:

    correct     prune (bottom-k by s_C) & (worst-k by r_C), trim lowest s_C first
    incorrect   prune (top-k by s_I) & (best-k, i.e. closest-to-1, r_I),
                trim highest s_I first
    combined    examples passing both of the above at a joint k, trim highest
                s_I first (harm outranks low benefit)
    aggressive50  keep the top half by the A score, ties to higher s_C then
                lower id

All selectors are deterministic given their inputs and seed, and every result
satisfies |pruned| within one example of round(fraction * |D|).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datagen import Example
from .errors import InputError, StrategySkip
from .model import Checkpoint, batch_arrays, forward_batch, forward_loss
from .scoring import ScoreTable

STRATEGY_FRACTIONS = {
    "correct": 0.20,
    "incorrect": 0.10,
    "combined": 0.10,
    "aggressive50": 0.50,
}

BASELINES = ("random", "mid_ppl", "top_ppl", "rds_plus")


@dataclass
class PruneResult:
    strategy: str
    target_fraction: float
    kept_ids: list[int]
    pruned_ids: list[int]
    thresholds: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        kept, pruned = set(self.kept_ids), set(self.pruned_ids)
        if kept & pruned:
            raise InputError("kept and pruned sets overlap")
        n = len(kept) + len(pruned)
        budget = round(self.target_fraction * n)
        if abs(len(pruned) - budget) > 1:
            raise InputError(f"pruned {len(pruned)} examples, budget was {budget}")


def _ordered(ids: np.ndarray, *keys) -> np.ndarray:
    """Indices sorted by the given keys (first key outranks later ones),
    with ids as the final deterministic tie-break."""
    return np.lexsort((ids,) + tuple(reversed(keys)))


def _grow_intersection(candidate_sets, budget: int, n: int):
    """Smallest k in [budget, n] whose intersected top-k sets reach budget.

    candidate_sets: list of index arrays, each sorted so that the first k
    entries are that criterion's k most prunable examples.
    """
    def cands(k):
        acc = set(candidate_sets[0][:k])
        for order in candidate_sets[1:]:
            acc &= set(order[:k])
        return acc

    lo, hi = budget, n
    while lo < hi:
        mid = (lo + hi) // 2
        if len(cands(mid)) >= budget:
            hi = mid
        else:
            lo = mid + 1
    return lo, cands(lo)


def if_prune(table: ScoreTable, strategy: str, fraction: float | None = None) -> PruneResult:
    """Apply one influence-based strategy to a score table."""
    if strategy not in STRATEGY_FRACTIONS:
        raise InputError(f"unknown strategy {strategy!r}")
    frac = STRATEGY_FRACTIONS[strategy] if fraction is None else float(fraction)
    if not 0.0 < frac < 1.0:
        raise InputError("fraction must lie in (0, 1)")
    ids = np.asarray(table.ids)
    n = len(ids)
    budget = round(frac * n)
    if budget == 0:
        raise InputError(f"fraction {frac} prunes nothing at |D|={n}")

    if strategy == "aggressive50":
        if np.isnan(table.a_score).any():
            raise StrategySkip("aggressive score unavailable (degenerate sigma)")
        order = _ordered(ids, -table.a_score, -table.s_c)
        keep_n = n - budget
        kept_idx, pruned_idx = order[:keep_n], order[keep_n:]
        thresholds = {"a_cutoff": float(table.a_score[order[keep_n - 1]])}
        return _result(strategy, frac, ids, kept_idx, pruned_idx, thresholds)

    low_sc = _ordered(ids, table.s_c)            # least beneficial first
    worst_rc = _ordered(ids, -table.r_c)         # largest mean rank first
    high_si = _ordered(ids, -table.s_i)          # most harmful first
    best_ri = _ordered(ids, table.r_i)           # rank closest to 1 first

    if strategy == "correct":
        sets, trim_keys = [low_sc, worst_rc], (table.s_c, -table.r_c)
    elif strategy == "incorrect":
        sets, trim_keys = [high_si, best_ri], (-table.s_i, table.r_i)
    else:  # combined
        sets = [low_sc, worst_rc, high_si, best_ri]
        trim_keys = (-table.s_i, table.s_c)

    k, cands = _grow_intersection(sets, budget, n)
    cand_idx = np.asarray(sorted(cands))
    trim = _ordered(ids[cand_idx], *(key[cand_idx] for key in trim_keys))
    pruned_idx = cand_idx[trim[:budget]]
    kept_idx = np.setdiff1d(np.arange(n), pruned_idx)
    thresholds = {"k": int(k), "intersection_size": int(len(cands))}
    if strategy in ("correct", "combined"):
        thresholds["s_C_cutoff"] = float(np.sort(table.s_c)[k - 1])
        thresholds["r_C_cutoff"] = float(np.sort(table.r_c)[n - k])
    if strategy in ("incorrect", "combined"):
        thresholds["s_I_cutoff"] = float(np.sort(table.s_i)[n - k])
        thresholds["r_I_cutoff"] = float(np.sort(table.r_i)[k - 1])
    return _result(strategy, frac, ids, kept_idx, pruned_idx, thresholds)


def _result(strategy, frac, ids, kept_idx, pruned_idx, thresholds, seed=None):
    return PruneResult(
        strategy=strategy,
        target_fraction=frac,
        kept_ids=sorted(int(i) for i in ids[kept_idx]),
        pruned_ids=sorted(int(i) for i in ids[pruned_idx]),
        thresholds=thresholds,
        seed=seed,
    )


# --- baseline signals ------------------------------------------------------------

def perplexity(ckpt: Checkpoint, example: Example) -> float:
    """exp(mean per-token CE over completion positions)."""
    _, loss = forward_loss(ckpt, example)
    return float(np.exp(loss))


def perplexities(ckpt: Checkpoint, examples, batch_size: int = 256) -> np.ndarray:
    from .model import _prediction_mask, masked_ce_loss
    out = np.empty(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        tokens, valid, mask = batch_arrays(ckpt.config, chunk)
        logits, _ = forward_batch(ckpt, tokens, want_caches=False)
        predmask = _prediction_mask(mask, valid)
        targets = np.zeros_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        out[start : start + len(chunk)] = np.exp(masked_ce_loss(logits, targets, predmask))
    return out


def embed(ckpt: Checkpoint, example: Example) -> np.ndarray:
    """Mean over all sequence positions of the last hidden representation."""
    return embed_many(ckpt, [example])[0]


def embed_many(ckpt: Checkpoint, examples, batch_size: int = 256) -> np.ndarray:
    out = np.empty((len(examples), ckpt.config.embed_dim))
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        tokens, valid, _ = batch_arrays(ckpt.config, chunk)
        _, caches = forward_batch(ckpt, tokens)
        h = caches["hbar"][:, :, :-1]
        w = valid.astype(np.float64)
        out[start : start + len(chunk)] = (
            (h * w[..., None]).sum(axis=1) / w.sum(axis=1)[:, None]
        )
    return out


def baseline_select(method: str, D, V, frac_prune: float, seed: int,
                    base: Checkpoint | None = None,
                    ppl: np.ndarray | None = None,
                    train_emb: np.ndarray | None = None,
                    val_emb: np.ndarray | None = None) -> PruneResult:
    """Random / Mid-PPL / Top-PPL / RDS+ selection at a pruned fraction.

    Perplexities and embeddings are computed under `base` when not supplied
    precomputed. Ties always break toward the lower id.
    """
    if method not in BASELINES:
        raise InputError(f"unknown baseline {method!r}")
    if not 0.0 < frac_prune < 1.0:
        raise InputError("frac_prune must lie in (0, 1)")
    ids = np.asarray([ex.id for ex in D])
    n = len(ids)
    budget = round(frac_prune * n)
    if budget > n:
        raise InputError("prune budget exceeds the dataset")
    keep_n = n - budget

    if method == "random":
        rng = np.random.default_rng(seed)
        pruned_idx = rng.choice(n, size=budget, replace=False)
        kept_idx = np.setdiff1d(np.arange(n), pruned_idx)
        return _result(method, frac_prune, ids, kept_idx, pruned_idx,
                       {"rule": "uniform without replacement"}, seed=seed)

    if method in ("mid_ppl", "top_ppl"):
        if ppl is None:
            if base is None:
                raise InputError(f"{method} needs a base checkpoint or perplexities")
            ppl = perplexities(base, D)
        ppl = np.asarray(ppl, dtype=np.float64)
        if method == "mid_ppl":
            med = float(np.median(ppl))
            order = _ordered(ids, -np.abs(ppl - med))   # farthest from median first
            thresholds = {"median_ppl": med,
                          "max_kept_distance": float(np.abs(ppl - med)[order[budget]])
                          if budget < n else None}
        else:
            order = _ordered(ids, ppl)                   # lowest perplexity first
            thresholds = {"ppl_cutoff": float(ppl[order[budget - 1]])}
        pruned_idx, kept_idx = order[:budget], order[budget:]
        return _result(method, frac_prune, ids, kept_idx, pruned_idx,
                       thresholds, seed=seed)

    # rds_plus: round-robin over validation queries, each claiming its
    # highest-inner-product unclaimed training example
    if train_emb is None or val_emb is None:
        if base is None:
            raise InputError("rds_plus needs a base checkpoint or embeddings")
        train_emb = embed_many(base, D)
        val_emb = embed_many(base, V)
    if len(V) == 0:
        raise InputError("rds_plus needs a nonempty validation set")
    sims = np.asarray(val_emb) @ np.asarray(train_emb).T    # (|V|, |D|)
    claimed = np.zeros(n, dtype=bool)
    kept_order = []
    v = 0
    while len(kept_order) < keep_n:
        row = sims[v % len(V)].copy()
        row[claimed] = -np.inf
        best = int(np.argmax(row))          # argmax takes the lowest id on ties
        claimed[best] = True
        kept_order.append(best)
        v += 1
    kept_idx = np.asarray(sorted(kept_order))
    pruned_idx = np.setdiff1d(np.arange(n), kept_idx)
    return _result(method, frac_prune, ids, kept_idx, pruned_idx,
                   {"rule": "round-robin argmax inner product"}, seed=seed)


def kept_corpus(D, result: PruneResult):
    kept = set(result.kept_ids)
    return [ex for ex in D if ex.id in kept]


# --- JSON persistence --------------------------------------------------------------

def save_prune_result(path, result: PruneResult) -> None:
    doc = {
        "strategy": result.strategy,
        "target_fraction": result.target_fraction,
        "kept_ids": result.kept_ids,
        "pruned_ids": result.pruned_ids,
        "thresholds": result.thresholds,
        "seed": result.seed,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_prune_result(path) -> PruneResult:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return PruneResult(
        strategy=doc["strategy"],
        target_fraction=float(doc["target_fraction"]),
        kept_ids=[int(i) for i in doc["kept_ids"]],
        pruned_ids=[int(i) for i in doc["pruned_ids"]],
        thresholds=doc["thresholds"],
        seed=doc["seed"],
    )
