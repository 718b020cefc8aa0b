"""Aggregate the raw influence matrix into per-example scores and ranks.

Orientation: raw entries are negated once here, so that larger means "pulls
the model harder toward the recorded completion". Over C columns (completions
that became correct) high s_C is beneficial; over I columns (completions that
became wrong) high s_I is harmful. Ranks are assigned per column over the
oriented values in descending order (rank 1 = strongest pull), ties averaged,
then averaged across the subset's columns.

The aggressive combined score is

    A(d) = sign(s_C) s_C^2 / sigma_C - sign(s_I) s_I^2 / sigma_I

with sigma_* the population standard deviation of the corresponding score over
the whole training set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, NumericError, StrategySkip
from .influence import InfluenceMatrix


def _subset_values(matrix: InfluenceMatrix, subset: str) -> np.ndarray:
    if subset not in ("C", "I"):
        raise InputError(f"subset must be 'C' or 'I', got {subset!r}")
    cols = matrix.columns(subset)
    if cols.shape[1] == 0:
        raise StrategySkip(f"no {subset} columns in the influence matrix")
    return -cols            # oriented: higher = stronger pull toward completion


def aggregate_mean(matrix: InfluenceMatrix, subset: str) -> np.ndarray:
    """Mean oriented influence per training example over the subset's columns."""
    return _subset_values(matrix, subset).mean(axis=1)


def aggregate_rank(matrix: InfluenceMatrix, subset: str) -> np.ndarray:
    """Mean per-column descending rank (1 = strongest), ties averaged."""
    vals = _subset_values(matrix, subset)
    ranks = np.empty_like(vals)
    for j in range(vals.shape[1]):
        ranks[:, j] = rankdata(-vals[:, j], method="average")
    return ranks.mean(axis=1)


@dataclass
class ScoreTable:
    ids: list[int]
    s_c: np.ndarray
    s_i: np.ndarray
    r_c: np.ndarray
    r_i: np.ndarray
    sigma_c: float
    sigma_i: float
    a_score: np.ndarray
    corrupted: list[bool] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ids)
        for arr in (self.s_c, self.s_i, self.r_c, self.r_i, self.a_score):
            if len(arr) != n:
                raise InputError("score columns must all have |D| entries")
        if not self.corrupted:
            self.corrupted = [False] * n


def aggressive_score(s_c: np.ndarray, s_i: np.ndarray,
                     sigma_c: float, sigma_i: float) -> np.ndarray:
    """sign-preserving squared benefit minus squared harm, sigma-normalized."""
    if sigma_c <= 0 or sigma_i <= 0:
        raise NumericError("degenerate score distribution (zero sigma)")
    return np.sign(s_c) * s_c**2 / sigma_c - np.sign(s_i) * s_i**2 / sigma_i


def build_score_table(matrix: InfluenceMatrix, train=None) -> ScoreTable:
    """Full per-example table; `train` (if given) supplies corrupted flags."""
    s_c = aggregate_mean(matrix, "C")
    s_i = aggregate_mean(matrix, "I")
    r_c = aggregate_rank(matrix, "C")
    r_i = aggregate_rank(matrix, "I")
    sigma_c = float(np.std(s_c))
    sigma_i = float(np.std(s_i))
    if sigma_c > 0 and sigma_i > 0:
        a = aggressive_score(s_c, s_i, sigma_c, sigma_i)
    else:
        a = np.full_like(s_c, np.nan)
    corrupted = []
    if train is not None:
        by_id = {ex.id: ex.corrupted for ex in train}
        corrupted = [bool(by_id.get(i, False)) for i in matrix.row_ids]
    return ScoreTable(list(matrix.row_ids), s_c, s_i, r_c, r_i,
                      sigma_c, sigma_i, a, corrupted)


def distribution_stats(scores, bins: int):
    """Equal-width histogram over [min, max] plus the population std.

    Values on an interior bin edge land in the higher bin; the maximum lands
    in the last bin (numpy's convention).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise InputError("empty score vector")
    if bins < 1:
        raise InputError("bins must be >= 1")
    counts, edges = np.histogram(scores, bins=bins)
    return counts, edges, float(np.std(scores))


# --- CSV interface -------------------------------------------------------------------

CSV_HEADER = ["id", "s_C", "s_I", "r_C", "r_I", "A", "corrupted"]


def save_score_table(path, table: ScoreTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for i in range(len(table.ids)):
            writer.writerow([
                table.ids[i],
                repr(float(table.s_c[i])),
                repr(float(table.s_i[i])),
                repr(float(table.r_c[i])),
                repr(float(table.r_i[i])),
                repr(float(table.a_score[i])),
                int(table.corrupted[i]),
            ])


def load_score_table(path) -> ScoreTable:
    ids, s_c, s_i, r_c, r_i, a, corr = [], [], [], [], [], [], []
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise InputError(f"unexpected score table header {header}")
        for row in reader:
            ids.append(int(row[0]))
            s_c.append(float(row[1]))
            s_i.append(float(row[2]))
            r_c.append(float(row[3]))
            r_i.append(float(row[4]))
            a.append(float(row[5]))
            corr.append(bool(int(row[6])))
    s_c, s_i = np.asarray(s_c), np.asarray(s_i)
    return ScoreTable(ids, s_c, s_i, np.asarray(r_c), np.asarray(r_i),
                      float(np.std(s_c)), float(np.std(s_i)),
                      np.asarray(a), corr)
