"""Raw influence values of training examples on recorded query completions.

entry(d, v) = -<grad_q(v), (H + damping I)^-1 grad_d(d)> where grad_q is the
cross-entropy gradient of query v's recorded greedy completion and grad_d the
training-loss gradient of example d, both at the fine-tuned checkpoint and
restricted to the same layer filter as the curvature basis. The inverse-
Hessian product is applied on the query side (one solve per column) and reused
across all rows, which is exact by symmetry of the inverse.

Sign: entry(d, v) is the first-order change of the recorded completion's loss
per unit of upweighting of d, so negative entries mean upweighting d pulls the
model toward that completion. The matrix keeps this raw sign; orientation
happens in the scoring module.

The datastore is a directory holding a JSON manifest (ids, tags, provenance,
shard list with hashes) plus row-range shards in the binary container format.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import dumps_canonical, read_container, sha256_file, write_container
from .datagen import Example
from .ekfac import EkfacBasis, ihvp
from .errors import InputError, NumericError, ProvenanceError
from .evalharness import FlipSets
from .model import Checkpoint, checkpoint_hash, per_example_gradient


@dataclass
class InfluenceMatrix:
    values: np.ndarray                 # (|D|, |C| + |I|)
    row_ids: list[int]
    col_ids: list[int]
    col_tags: list[str]                # "C" or "I" per column
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n, m = self.values.shape
        if len(self.row_ids) != n or len(self.col_ids) != m or len(self.col_tags) != m:
            raise InputError("id/tag lengths do not match the value matrix")
        if any(t not in ("C", "I") for t in self.col_tags):
            raise InputError("column tags must be 'C' or 'I'")
        if not np.isfinite(self.values).all():
            raise NumericError("influence matrix contains non-finite entries")

    def columns(self, tag: str) -> np.ndarray:
        return self.values[:, [i for i, t in enumerate(self.col_tags) if t == tag]]


def query_gradient(tuned: Checkpoint, query, recorded_completion,
                   layer_filter="mlp") -> np.ndarray:
    """Gradient of the recorded completion's mean CE w.r.t. filtered params.

    Only the recorded completion enters; the query's gold answer plays no role.
    """
    completion = [int(t) for t in recorded_completion]
    if not completion:
        raise InputError("empty recorded completion")
    prompt = list(query.prompt_tokens) if hasattr(query, "prompt_tokens") else list(query)
    ex = Example(
        id=getattr(query, "id", -1),
        prompt_tokens=prompt,
        completion_tokens=completion,
        loss_mask=[False] * len(prompt) + [True] * len(completion),
        gold_answer=getattr(query, "gold_answer", "0"),
    )
    return per_example_gradient(tuned, ex, layer_filter=layer_filter)


def influence_matrix(tuned: Checkpoint, D, flips: FlipSets, basis: EkfacBasis,
                     layer_filter="mlp") -> InfluenceMatrix:
    """Dense |D| x |C u I| raw influence table at the tuned checkpoint."""
    ck_hash = checkpoint_hash(tuned)
    if basis.checkpoint_hash != ck_hash:
        raise ProvenanceError("curvature basis was built at a different checkpoint")
    if not D:
        raise InputError("empty training set")
    records = [("C", r) for r in flips.C] + [("I", r) for r in flips.I]
    if not records:
        raise InputError("both flip sets are empty")

    cols = []
    for _, rec in records:
        qg = query_gradient(tuned, rec, rec.completion_tokens, layer_filter)
        cols.append(ihvp(basis, qg))
    solved = np.stack(cols, axis=1)                      # (P, n_cols)

    values = np.empty((len(D), solved.shape[1]))
    for i, d in enumerate(D):
        g = per_example_gradient(tuned, d, layer_filter=layer_filter)
        values[i] = -(g @ solved)

    return InfluenceMatrix(
        values=values,
        row_ids=[ex.id for ex in D],
        col_ids=[rec.query_id for _, rec in records],
        col_tags=[tag for tag, _ in records],
        provenance={
            "checkpoint_hash": ck_hash,
            "damping": basis.damping,
            "layer_filter": list(basis.layer_names),
        },
    )


# --- datastore ----------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def save_matrix(dirpath, matrix: InfluenceMatrix, shard_rows: int = 512) -> None:
    os.makedirs(dirpath, exist_ok=True)
    n = matrix.values.shape[0]
    shards = []
    for idx, start in enumerate(range(0, n, shard_rows)):
        stop = min(start + shard_rows, n)
        fname = f"shard_{idx:04d}.bin"
        write_container(
            os.path.join(dirpath, fname),
            "influence_shard",
            {"row_start": start, "row_end": stop},
            {"values": matrix.values[start:stop]},
        )
        shards.append({"file": fname, "row_start": start, "row_end": stop,
                       "sha256": sha256_file(os.path.join(dirpath, fname))})
    manifest = {
        "row_ids": matrix.row_ids,
        "col_ids": matrix.col_ids,
        "col_tags": matrix.col_tags,
        "provenance": matrix.provenance,
        "shards": shards,
    }
    with open(os.path.join(dirpath, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write(dumps_canonical(manifest))


def load_matrix(dirpath) -> InfluenceMatrix:
    with open(os.path.join(dirpath, MANIFEST_NAME), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    blocks = []
    for shard in manifest["shards"]:
        path = os.path.join(dirpath, shard["file"])
        if sha256_file(path) != shard["sha256"]:
            raise ProvenanceError(f"shard {shard['file']} does not match its "
                                  "recorded hash")
        _, meta, arrays = read_container(path, expect_kind="influence_shard")
        if meta["row_start"] != shard["row_start"] or meta["row_end"] != shard["row_end"]:
            raise ProvenanceError(f"shard {shard['file']} row range mismatch")
        blocks.append(arrays["values"])
    values = np.concatenate(blocks, axis=0) if blocks else np.empty((0, 0))
    return InfluenceMatrix(
        values=values,
        row_ids=[int(i) for i in manifest["row_ids"]],
        col_ids=[int(i) for i in manifest["col_ids"]],
        col_tags=[str(t) for t in manifest["col_tags"]],
        provenance=manifest["provenance"],
    )
