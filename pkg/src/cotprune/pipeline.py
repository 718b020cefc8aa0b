"""End-to-end experiment orchestration with cached, hash-checked stages.

A run proceeds per experiment seed: generate corpora (pretraining corpus,
corrupted training set D, validation V, held-out split), pretrain the base
model, fine-tune on D, build flip sets between base and tuned, estimate the
curvature basis, fill the influence matrix, aggregate scores, prune with every
requested strategy and baseline, retrain on each kept corpus, and evaluate
greedy accuracy plus sampled pass@1. Every stage writes its artifact next to a
``.prov.json`` sidecar recording the hashes of its inputs; re-running with the
same config reuses artifacts whose sidecars still match and rebuilds anything
deleted, bit-exactly.

Checkpoint selection mirrors the training protocol: the attribution model is
the final fine-tuning epoch, while each *evaluation* run (including the
unpruned one) uses the snapshot with the best greedy accuracy on V. Because V
also defines the flip sets, metrics are reported on the held-out split as
well, which exposes the selection leakage instead of hiding it.

The leave-one-out oracle retrains either the full model or just the readout
head on frozen features (a convex problem solved to tight tolerance). Training
examples are weighted uniformly per distinct content: removing one copy of a
duplicated example provably changes nothing, while removing a unique example
is ordinary leave-one-out.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from . import datagen, ekfac, evalharness, influence, pruning, scoring
from .container import dumps_canonical, sha256_file
from .datagen import Example, TaskSpec
from .errors import CotPruneError, InputError, RefusalError
from .model import (
    Checkpoint,
    ModelConfig,
    SamplingConfig,
    TrainConfig,
    batch_arrays,
    checkpoint_hash,
    decode_batch,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
    softmax,
    train,
    _prediction_mask,
    init_model,
)

log = logging.getLogger(__name__)

IF_STRATEGIES = ("correct", "incorrect", "combined", "aggressive50")
LOO_CANDIDATE_CAP = 200
HEAD_RIDGE = 1e-3


class StageFailure(CotPruneError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class InfluenceConfig:
    damping: float | None = None      # None -> 0.1 * mean(Lambda)
    layer_filter: str = "mlp"


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 8
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 0                    # disabled by default
    max_new_tokens: int | None = None


@dataclass(frozen=True)
class PretrainConfig:
    n_examples: int = 3000
    epochs: int = 30
    peak_lr: float = 0.3
    batch_size: int = 32

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, peak_lr=self.peak_lr,
                           batch_size=self.batch_size,
                           snapshot_every=self.epochs, seed=seed)


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=lambda: TaskSpec(
        n_train=1000, n_val=200, n_heldout=200,
        corruption_rate=0.10, corruption_mode=datagen.WRONG_STEP))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(window=16))
    # fine-tuning protocol; the peak rate was tuned once on the synthetic
    # corpus and frozen here
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=10, peak_lr=0.12, batch_size=32, snapshot_every=2))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    strategies: tuple = IF_STRATEGIES
    baselines: tuple = pruning.BASELINES
    seeds: tuple = (0, 1, 2)
    outdir: str = "runs/default"

    def __post_init__(self):
        known = set(IF_STRATEGIES) | set(pruning.BASELINES)
        for s in tuple(self.strategies) + tuple(self.baselines):
            if s not in known:
                raise InputError(f"unknown strategy {s!r}")
        if not self.seeds:
            raise InputError("seeds must be nonempty")

    # -- canonical JSON ------------------------------------------------------
    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["strategies"] = list(self.strategies)
        doc["baselines"] = list(self.baselines)
        doc["seeds"] = list(self.seeds)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        kw = dict(doc)
        if "task" in kw:
            kw["task"] = TaskSpec(**kw["task"])
        if "model" in kw:
            kw["model"] = ModelConfig(**kw["model"])
        if "train" in kw:
            kw["train"] = TrainConfig(**kw["train"])
        if "pretrain" in kw:
            kw["pretrain"] = PretrainConfig(**kw["pretrain"])
        if "influence" in kw:
            kw["influence"] = InfluenceConfig(**kw["influence"])
        if "eval" in kw:
            kw["eval"] = EvalConfig(**kw["eval"])
        for key in ("strategies", "baselines", "seeds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def content_hash(self) -> str:
        doc = self.to_json()
        doc.pop("outdir")
        return zlib.crc32(dumps_canonical(doc).encode()).to_bytes(4, "big").hex()


@dataclass
class Report:
    rows: list                         # one dict per (strategy, seed)
    delta_vs_random: dict              # (strategy, benchmark) -> delta
    scatter: dict                      # seed -> list of row dicts
    histograms: dict                   # seed -> list of row dicts
    skipped: dict                      # seed -> [strategy, ...]
    provenance: dict                   # config hash + artifact hashes consumed


# --- cache plumbing -------------------------------------------------------------

def _prov_path(path: Path) -> Path:
    return Path(str(path) + ".prov.json")


def _cache_hit(path: Path, key: dict) -> bool:
    prov = _prov_path(path)
    if not (path.exists() and prov.exists()):
        return False
    return prov.read_text(encoding="utf-8") == dumps_canonical(key)


def _mark(path: Path, key: dict) -> None:
    _prov_path(path).write_text(dumps_canonical(key), encoding="utf-8")


def _derive_seed(base: int, run_seed: int, salt: int) -> int:
    return int(base + 100_003 * run_seed + 7_919 * salt)


def _eval_rng(run_seed: int, strategy: str, split: str, query_id: int):
    return np.random.default_rng(
        [run_seed, zlib.crc32(strategy.encode()), zlib.crc32(split.encode()), query_id])


# --- per-seed runner --------------------------------------------------------------

class Runner:
    """Executes and caches every stage for one ExperimentConfig."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.outdir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._memo = {}

    def seed_dir(self, s: int) -> Path:
        d = self.out / f"seed_{s}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _stage(self, name: str, fn):
        try:
            return fn()
        except CotPruneError:
            raise
        except Exception as e:  # noqa: BLE001 - annotate with the stage name
            raise StageFailure(name, e) from e

    # -- corpora ---------------------------------------------------------------
    def stage_corpus(self, s: int):
        def build():
            key = ("corpus", s)
            if key in self._memo:
                return self._memo[key]
            d = self.seed_dir(s)
            task = dataclasses.replace(self.cfg.task,
                                       seed=_derive_seed(self.cfg.task.seed, s, 0))
            pre_task = dataclasses.replace(
                task, n_train=self.cfg.pretrain.n_examples, n_val=0, n_heldout=0,
                corruption_rate=0.0, seed=_derive_seed(self.cfg.task.seed, s, 1))
            prov = {"stage": "corpus", "task": dataclasses.asdict(task),
                    "pretrain_task": dataclasses.asdict(pre_task)}
            paths = {n: d / f"{n}.jsonl" for n in ("pretrain", "train", "val", "heldout")}
            if not all(_cache_hit(p, prov) for p in paths.values()):
                tr, va, ho = datagen.generate_splits(task)
                pre, _, _ = datagen.generate_splits(pre_task)
                for name, data in [("pretrain", pre), ("train", tr),
                                   ("val", va), ("heldout", ho)]:
                    datagen.write_corpus(paths[name], data)
                    _mark(paths[name], prov)
            out = {n: datagen.read_corpus(p) for n, p in paths.items()}
            out["paths"] = paths
            self._memo[key] = out
            return out
        return self._stage("corpus", build)

    # -- base (pretrained) model -------------------------------------------------
    def stage_base(self, s: int) -> Checkpoint:
        def build():
            key = ("base", s)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            d = self.seed_dir(s)
            path = d / "base.ckpt"
            model_cfg = dataclasses.replace(
                self.cfg.model, seed=_derive_seed(self.cfg.model.seed, s, 2))
            tc = self.cfg.pretrain.train_config(_derive_seed(0, s, 3))
            prov = {"stage": "base",
                    "pretrain_corpus": sha256_file(corpora["paths"]["pretrain"]),
                    "model": dataclasses.asdict(model_cfg),
                    "train": dataclasses.asdict(tc)}
            if _cache_hit(path, prov):
                ckpt = load_checkpoint(path)
            else:
                ckpt = train(init_model(model_cfg), corpora["pretrain"], tc)[-1]
                save_checkpoint(path, ckpt)
                _mark(path, prov)
            self._memo[key] = ckpt
            return ckpt
        return self._stage("base", build)

    # -- fine-tune on the full training set ---------------------------------------
    def _train_series(self, tag: str, s: int, start: Checkpoint, data, data_hash: str):
        """Cached training run; returns the snapshot series."""
        d = self.seed_dir(s) / tag
        d.mkdir(exist_ok=True)
        tc = dataclasses.replace(self.cfg.train,
                                 seed=_derive_seed(self.cfg.train.seed, s, 4))
        prov = {"stage": tag, "start": checkpoint_hash(start), "data": data_hash,
                "train": dataclasses.asdict(tc)}
        marker = d / "series.json"
        if _cache_hit(marker, prov):
            epochs = json.loads(marker.read_text())["epochs"]
            return [load_checkpoint(d / f"epoch_{e:03d}.ckpt") for e in epochs]
        series = train(start, data, tc)
        for ckpt in series:
            save_checkpoint(d / f"epoch_{ckpt.epoch:03d}.ckpt", ckpt)
        marker.write_text(dumps_canonical({"epochs": [c.epoch for c in series]}),
                          encoding="utf-8")
        _mark(marker, prov)
        return series

    def stage_finetune(self, s: int):
        def build():
            key = ("finetune", s)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            base = self.stage_base(s)
            series = self._train_series("finetune", s, base, corpora["train"],
                                        sha256_file(corpora["paths"]["train"]))
            self._memo[key] = series
            return series
        return self._stage("finetune", build)

    def tuned(self, s: int) -> Checkpoint:
        """The attribution model: final epoch of the full fine-tune."""
        return self.stage_finetune(s)[-1]

    # -- flip sets ------------------------------------------------------------------
    def stage_flips(self, s: int) -> evalharness.FlipSets:
        def build():
            key = ("flips", s)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            base, tuned = self.stage_base(s), self.tuned(s)
            path = self.seed_dir(s) / "flips.json"
            prov = {"stage": "flips", "base": checkpoint_hash(base),
                    "tuned": checkpoint_hash(tuned),
                    "val": sha256_file(corpora["paths"]["val"])}
            if _cache_hit(path, prov):
                flips = evalharness.load_flipsets(path)
            else:
                flips = evalharness.build_flip_sets(base, tuned, corpora["val"])
                evalharness.save_flipsets(path, flips)
                _mark(path, prov)
            self._memo[key] = flips
            return flips
        return self._stage("flips", build)

    # -- curvature -------------------------------------------------------------------
    def stage_basis(self, s: int) -> ekfac.EkfacBasis:
        def build():
            key = ("basis", s)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            tuned = self.tuned(s)
            path = self.seed_dir(s) / "basis.bin"
            prov = {"stage": "basis", "tuned": checkpoint_hash(tuned),
                    "train": sha256_file(corpora["paths"]["train"]),
                    "influence": dataclasses.asdict(self.cfg.influence)}
            if _cache_hit(path, prov):
                basis = ekfac.load_basis(path)
            else:
                factors = ekfac.estimate_factors(
                    tuned, corpora["train"], self.cfg.influence.layer_filter)
                basis = ekfac.fit_basis(factors, tuned, corpora["train"],
                                        damping=self.cfg.influence.damping)
                ekfac.save_basis(path, basis)
                _mark(path, prov)
            self._memo[key] = basis
            return basis
        return self._stage("curvature", build)

    # -- influence matrix ---------------------------------------------------------------
    def stage_matrix(self, s: int) -> influence.InfluenceMatrix:
        def build():
            key = ("matrix", s)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            tuned = self.tuned(s)
            flips = self.stage_flips(s)
            basis = self.stage_basis(s)
            dirpath = self.seed_dir(s) / "matrix"
            marker = dirpath / influence.MANIFEST_NAME
            prov = {"stage": "matrix", "tuned": checkpoint_hash(tuned),
                    "flips": sha256_file(self.seed_dir(s) / "flips.json"),
                    "basis": sha256_file(self.seed_dir(s) / "basis.bin")}
            if _cache_hit(marker, prov):
                matrix = influence.load_matrix(dirpath)
            else:
                matrix = influence.influence_matrix(
                    tuned, corpora["train"], flips, basis,
                    layer_filter=self.cfg.influence.layer_filter)
                influence.save_matrix(dirpath, matrix)
                _mark(marker, prov)
            self._memo[key] = matrix
            return matrix
        return self._stage("influence", build)

    # -- scores ----------------------------------------------------------------------------
    def stage_scores(self, s: int) -> scoring.ScoreTable:
        def build():
            key = ("scores", s)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            matrix = self.stage_matrix(s)
            path = self.seed_dir(s) / "scores.csv"
            prov = {"stage": "scores",
                    "matrix": sha256_file(self.seed_dir(s) / "matrix" /
                                          influence.MANIFEST_NAME)}
            if _cache_hit(path, prov):
                table = scoring.load_score_table(path)
            else:
                table = scoring.build_score_table(matrix, corpora["train"])
                scoring.save_score_table(path, table)
                _mark(path, prov)
            self._memo[key] = table
            return table
        return self._stage("score", build)

    # -- pruning -----------------------------------------------------------------------------
    def stage_prune(self, s: int) -> dict:
        """strategy -> PruneResult for every runnable strategy and baseline."""
        def build():
            key = ("prune", s)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            d = self.seed_dir(s)
            results, skipped = {}, []
            want_if = [x for x in self.cfg.strategies if x in IF_STRATEGIES]

            if want_if:
                flips = self.stage_flips(s)
                needs_c = {"correct", "combined", "aggressive50"}
                needs_i = {"incorrect", "combined", "aggressive50"}
                runnable = []
                for strat in want_if:
                    if (strat in needs_c and not flips.C) or \
                       (strat in needs_i and not flips.I):
                        log.warning("seed %d: skipping %s (empty flip set)", s, strat)
                        skipped.append(strat)
                    else:
                        runnable.append(strat)
                if runnable:
                    table = self.stage_scores(s)
                    scores_hash = sha256_file(d / "scores.csv")
                    for strat in runnable:
                        path = d / f"prune_{strat}.json"
                        prov = {"stage": "prune", "strategy": strat,
                                "scores": scores_hash}
                        if _cache_hit(path, prov):
                            results[strat] = pruning.load_prune_result(path)
                        else:
                            results[strat] = pruning.if_prune(table, strat)
                            pruning.save_prune_result(path, results[strat])
                            _mark(path, prov)

            if self.cfg.baselines:
                base = self.stage_base(s)
                train_hash = sha256_file(corpora["paths"]["train"])
                ppl = emb = vemb = None
                for method in self.cfg.baselines:
                    path = d / f"prune_{method}.json"
                    prov = {"stage": "prune", "strategy": method,
                            "base": checkpoint_hash(base), "train": train_hash,
                            "seed": s}
                    if _cache_hit(path, prov):
                        results[method] = pruning.load_prune_result(path)
                        continue
                    if method in ("mid_ppl", "top_ppl") and ppl is None:
                        ppl = pruning.perplexities(base, corpora["train"])
                    if method == "rds_plus" and emb is None:
                        emb = pruning.embed_many(base, corpora["train"])
                        vemb = pruning.embed_many(base, corpora["val"])
                    results[method] = pruning.baseline_select(
                        method, corpora["train"], corpora["val"],
                        frac_prune=0.10, seed=_derive_seed(0, s, 5),
                        base=base, ppl=ppl, train_emb=emb, val_emb=vemb)
                    pruning.save_prune_result(path, results[method])
                    _mark(path, prov)

            # kept corpora for direct re-training
            for strat, res in results.items():
                kept_path = d / f"kept_{strat}.jsonl"
                prov = {"stage": "kept", "prune": sha256_file(d / f"prune_{strat}.json")}
                if not _cache_hit(kept_path, prov):
                    datagen.write_corpus(kept_path,
                                         pruning.kept_corpus(corpora["train"], res))
                    _mark(kept_path, prov)
            out = {"results": results, "skipped": skipped}
            self._memo[key] = out
            return out
        return self._stage("prune", build)

    # -- retraining on kept corpora ---------------------------------------------------------
    def stage_retrain(self, s: int, strategy: str):
        def build():
            key = ("retrain", s, strategy)
            if key in self._memo:
                return self._memo[key]
            if strategy == "none":
                series = self.stage_finetune(s)
            elif strategy == "no_sft":
                series = [self.stage_base(s)]
            else:
                kept_path = self.seed_dir(s) / f"kept_{strategy}.jsonl"
                kept = datagen.read_corpus(kept_path)
                series = self._train_series(f"retrain_{strategy}", s,
                                            self.stage_base(s), kept,
                                            sha256_file(kept_path))
            self._memo[key] = series
            return series
        return self._stage("retrain", build)

    # -- evaluation ----------------------------------------------------------------------------
    def _pass1(self, ckpt: Checkpoint, queries, run_seed: int, strategy: str,
               split: str) -> float:
        ev = self.cfg.eval
        sampling = SamplingConfig(temperature=ev.temperature, top_p=ev.top_p,
                                  top_k=ev.top_k, max_new_tokens=ev.max_new_tokens)
        prompts, rngs = [], []
        for q in queries:
            for _ in range(ev.n_samples):
                prompts.append(q.prompt_tokens)
            rng = _eval_rng(run_seed, strategy, split, q.id)
            rngs.extend(np.random.default_rng(rng.integers(0, 2**63 - 1))
                        for _ in range(ev.n_samples))
        comps = decode_batch(ckpt, prompts, mode="sampled", sampling=sampling,
                             rngs=rngs)
        total = 0.0
        for i, q in enumerate(queries):
            got = comps[i * ev.n_samples : (i + 1) * ev.n_samples]
            c = sum(evalharness._is_correct(g, q.gold_answer) for g in got)
            total += evalharness.pass_at_k(ev.n_samples, c, 1)
        return total / len(queries)

    def stage_eval(self, s: int, strategy: str) -> dict:
        def build():
            key = ("eval", s, strategy)
            if key in self._memo:
                return self._memo[key]
            corpora = self.stage_corpus(s)
            series = self.stage_retrain(s, strategy)
            path = self.seed_dir(s) / f"eval_{strategy}.json"
            prov = {"stage": "eval",
                    "series": [checkpoint_hash(c) for c in series],
                    "val": sha256_file(corpora["paths"]["val"]),
                    "heldout": sha256_file(corpora["paths"]["heldout"]),
                    "eval": dataclasses.asdict(self.cfg.eval)}
            if _cache_hit(path, prov):
                doc = json.loads(path.read_text(encoding="utf-8"))
                self._memo[key] = doc
                return doc
            best = evalharness.select_best_checkpoint(series, corpora["val"])
            doc = {"strategy": strategy, "seed": s, "best_epoch": best.epoch}
            for split in ("val", "heldout"):
                queries = corpora[split]
                flags = evalharness.accuracy_flags(best, queries)
                doc[f"acc_{split}"] = sum(flags) / len(flags)
                doc[f"pass1_{split}"] = self._pass1(best, queries, s, strategy, split)
            prune_res = self._prune_result(s, strategy)
            if prune_res is not None and prune_res.pruned_ids:
                by_id = {ex.id: ex.corrupted for ex in corpora["train"]}
                hits = sum(1 for i in prune_res.pruned_ids if by_id.get(i, False))
                doc["precision_corrupted"] = hits / len(prune_res.pruned_ids)
                doc["kept_fraction"] = len(prune_res.kept_ids) / len(corpora["train"])
            else:
                doc["precision_corrupted"] = None
                doc["kept_fraction"] = 1.0
            path.write_text(dumps_canonical(doc), encoding="utf-8")
            _mark(path, prov)
            self._memo[key] = doc
            return doc
        return self._stage("eval", build)

    def _prune_result(self, s: int, strategy: str):
        if strategy in ("none", "no_sft"):
            return None
        return self.stage_prune(s)["results"].get(strategy)

    # -- whole runs -------------------------------------------------------------------------------
    def strategies_to_eval(self, s: int) -> list[str]:
        pr = self.stage_prune(s)
        ordered = [x for x in self.cfg.strategies + self.cfg.baselines
                   if x in pr["results"]]
        return ordered + ["none", "no_sft"]

    def run_seed(self, s: int) -> list[dict]:
        return [self.stage_eval(s, strat) for strat in self.strategies_to_eval(s)]


# --- reporting -----------------------------------------------------------------------------------

HIST_BINS = 30


def _histogram_rows(table: scoring.ScoreTable) -> list[dict]:
    rows = []
    for metric, vec in (("s_C", table.s_c), ("s_I", table.s_i),
                        ("r_C", table.r_c), ("r_I", table.r_i)):
        counts, edges, sigma = scoring.distribution_stats(vec, HIST_BINS)
        for b in range(len(counts)):
            rows.append({"metric": metric, "bin_left": float(edges[b]),
                         "bin_right": float(edges[b + 1]),
                         "count": int(counts[b]), "sigma": sigma})
    return rows


def _scatter_rows(table: scoring.ScoreTable, prune_results: dict) -> list[dict]:
    flags = {}
    for strat in IF_STRATEGIES:
        res = prune_results.get(strat)
        flags[strat] = set(res.pruned_ids) if res is not None else set()
    rows = []
    for i, ex_id in enumerate(table.ids):
        row = {"id": ex_id, "s_C": float(table.s_c[i]), "s_I": float(table.s_i[i])}
        for strat in IF_STRATEGIES:
            row[f"pruned_{strat}"] = int(ex_id in flags[strat])
        row["corrupted"] = int(table.corrupted[i])
        rows.append(row)
    return rows


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Execute every stage for every seed and assemble the report."""
    runner = Runner(cfg)
    rows, scatter, hists, skipped = [], {}, {}, {}
    wants_influence = any(s in IF_STRATEGIES for s in cfg.strategies)
    for s in cfg.seeds:
        rows.extend(runner.run_seed(s))
        pr = runner.stage_prune(s)
        skipped[s] = pr["skipped"]
        if wants_influence and any(st in pr["results"] for st in IF_STRATEGIES):
            table = runner.stage_scores(s)
            scatter[s] = _scatter_rows(table, pr["results"])
            hists[s] = _histogram_rows(table)

    # mean over seeds per strategy, then deltas against random
    strategies = sorted({r["strategy"] for r in rows},
                        key=lambda x: [r["strategy"] for r in rows].index(x))
    means = {}
    for strat in strategies:
        sub = [r for r in rows if r["strategy"] == strat]
        means[strat] = {k: float(np.mean([r[k] for r in sub]))
                        for k in ("pass1_val", "pass1_heldout", "acc_val",
                                  "acc_heldout")}
    delta = {}
    if "random" in means:
        for strat in strategies:
            for bench in ("pass1_val", "pass1_heldout"):
                delta[(strat, bench)] = means[strat][bench] - means["random"][bench]

    cfg_doc = cfg.to_json()
    cfg_doc.pop("outdir")      # manifests must not depend on where they live
    provenance = {"config_hash": cfg.content_hash(), "config": cfg_doc}
    report = Report(rows=rows, delta_vs_random=delta, scatter=scatter,
                    histograms=hists, skipped=skipped, provenance=provenance)
    emit_report(report, cfg.outdir)
    return report


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return x


def emit_report(report: Report, outdir) -> dict:
    """Write results_table.csv, delta_vs_random.csv, scatter.csv,
    histograms.csv and manifest.json under outdir; returns file hashes."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    metric_cols = ["pass1_val", "pass1_heldout", "acc_val", "acc_heldout",
                   "precision_corrupted", "kept_fraction"]
    header = ["strategy", "seed"] + metric_cols
    table_rows = []
    strategies = []
    for r in report.rows:
        if r["strategy"] not in strategies:
            strategies.append(r["strategy"])
    for strat in strategies:
        sub = [r for r in report.rows if r["strategy"] == strat]
        for r in sub:
            table_rows.append([strat, r["seed"]] + [_fmt(r.get(c)) for c in metric_cols])
        mean_row = [strat, "mean"]
        for c in metric_cols:
            vals = [r.get(c) for r in sub]
            mean_row.append("" if any(v is None for v in vals)
                            else _fmt(float(np.mean([float(v) for v in vals]))))
        table_rows.append(mean_row)
    _write_csv(out / "results_table.csv", header, table_rows)

    delta_rows = [[strat, bench, _fmt(d)]
                  for (strat, bench), d in sorted(report.delta_vs_random.items())]
    _write_csv(out / "delta_vs_random.csv", ["strategy", "benchmark", "delta"],
               delta_rows)

    scatter_header = (["id", "s_C", "s_I"] +
                      [f"pruned_{s}" for s in IF_STRATEGIES] + ["corrupted"])
    hist_header = ["metric", "bin_left", "bin_right", "count", "sigma"]
    for s, rows in sorted(report.scatter.items()):
        _write_csv(out / f"seed_{s}" / "scatter.csv", scatter_header,
                   [[_fmt(r[c]) for c in scatter_header] for r in rows])
    for s, rows in sorted(report.histograms.items()):
        _write_csv(out / f"seed_{s}" / "histograms.csv", hist_header,
                   [[_fmt(r[c]) for c in hist_header] for r in rows])
    if report.scatter:
        first = min(report.scatter)
        _write_csv(out / "scatter.csv", scatter_header,
                   [[_fmt(r[c]) for c in scatter_header]
                    for r in report.scatter[first]])
        _write_csv(out / "histograms.csv", hist_header,
                   [[_fmt(r[c]) for c in hist_header]
                    for r in report.histograms[first]])

    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out))] = sha256_file(p)
    manifest = {"files": files, "provenance": report.provenance,
                "skipped": {str(k): v for k, v in sorted(report.skipped.items())}}
    (out / "manifest.json").write_text(dumps_canonical(manifest), encoding="utf-8")
    return files


# --- leave-one-out oracle ---------------------------------------------------------------------------

def _head_rows(tuned: Checkpoint, examples):
    """Frozen readout-input features and targets, one row per scored position.

    Returns (phi, targets, owner) where owner[r] is the example index of row r.
    """
    phis, tgts, owner = [], [], []
    for start in range(0, len(examples), 256):
        chunk = examples[start : start + 256]
        tokens, valid, mask = batch_arrays(tuned.config, chunk)
        _, caches = forward_batch(tuned, tokens)
        predmask = _prediction_mask(mask, valid)
        targets = np.zeros_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        for b in range(len(chunk)):
            sel = predmask[b]
            phis.append(caches["hbar"][b][sel])
            tgts.append(targets[b][sel])
            owner.extend([start + b] * int(sel.sum()))
    return np.concatenate(phis), np.concatenate(tgts), np.asarray(owner)


def _content_key(ex: Example):
    return (tuple(ex.prompt_tokens), tuple(ex.completion_tokens))


def _content_weights(examples, drop_index: int | None = None) -> np.ndarray:
    """Per-example weights: uniform over distinct contents, split over copies.

    Dropping one copy of a duplicated example re-routes its weight to the
    remaining copies, leaving the weighted objective unchanged.
    """
    alive = [i for i in range(len(examples)) if i != drop_index]
    counts = {}
    for i in alive:
        k = _content_key(examples[i])
        counts[k] = counts.get(k, 0) + 1
    n_distinct = len(counts)
    w = np.zeros(len(examples))
    for i in alive:
        w[i] = 1.0 / (counts[_content_key(examples[i])] * n_distinct)
    return w


def _fit_head(phi, tgt, row_w, w0, vocab, ridge, maxiter=1000,
              ftol=1e-14, gtol=1e-10):
    """Convex multinomial fit of the readout on frozen features."""
    dim = phi.shape[1]
    rows = np.arange(len(tgt))

    def objective(wflat):
        W = wflat.reshape(vocab, dim)
        logits = phi @ W.T
        x = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(x).sum(axis=1))
        nll = lse - x[rows, tgt]
        p = np.exp(x - lse[:, None])
        p[rows, tgt] -= 1.0
        grad = (p * row_w[:, None]).T @ phi + ridge * W
        return float(nll @ row_w + 0.5 * ridge * (W ** 2).sum()), grad.ravel()

    res = scipy.optimize.minimize(objective, w0.ravel(), jac=True,
                                  method="L-BFGS-B",
                                  options={"maxiter": maxiter, "ftol": ftol,
                                           "gtol": gtol})
    return res.x.reshape(vocab, dim)


def _head_query_loss(W, phi, tgt, owner, n_queries) -> float:
    logits = phi @ W.T
    x = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1))
    nll = lse - x[np.arange(len(tgt)), tgt]
    per_query = np.bincount(owner, weights=nll, minlength=n_queries)
    counts = np.bincount(owner, minlength=n_queries)
    return float((per_query / np.maximum(counts, 1)).mean())


def loo_oracle(cfg: ExperimentConfig, candidate_ids, v_subset=None,
               mode: str = "convex_head", seed: int | None = None) -> np.ndarray:
    """Change in mean recorded-completion loss over v_subset when each
    candidate is dropped and the model is retrained.

    convex_head freezes every layer except the readout and refits it to
    convergence (deterministic); full_retrain reruns fine-tuning from the base
    checkpoint with the identical seed. v_subset defaults to the flip sets.
    """
    candidate_ids = list(candidate_ids)
    if len(candidate_ids) > LOO_CANDIDATE_CAP:
        raise RefusalError(f"{len(candidate_ids)} candidates exceed the LOO cap "
                           f"of {LOO_CANDIDATE_CAP}")
    if not candidate_ids:
        return np.zeros(0)
    if mode not in ("convex_head", "full_retrain"):
        raise InputError(f"unknown LOO mode {mode!r}")
    runner = Runner(cfg)
    s = cfg.seeds[0] if seed is None else seed
    corpora = runner.stage_corpus(s)
    D = corpora["train"]
    tuned = runner.tuned(s)
    if v_subset is None:
        flips = runner.stage_flips(s)
        v_subset = flips.C + flips.I
    if not v_subset:
        raise InputError("empty query subset for the LOO oracle")

    queries = [Example(id=i, prompt_tokens=list(r.prompt_tokens),
                       completion_tokens=list(r.completion_tokens),
                       loss_mask=[False] * len(r.prompt_tokens)
                                 + [True] * len(r.completion_tokens),
                       gold_answer=getattr(r, "gold_answer", "0"))
               for i, r in enumerate(v_subset)]
    id_to_pos = {ex.id: i for i, ex in enumerate(D)}
    missing = [c for c in candidate_ids if c not in id_to_pos]
    if missing:
        raise InputError(f"candidate ids not in the training set: {missing[:5]}")

    if mode == "full_retrain":
        tc = dataclasses.replace(cfg.train, seed=_derive_seed(cfg.train.seed, s, 4))
        base = runner.stage_base(s)
        full_loss = _recorded_loss(tuned, queries)
        deltas = []
        for cid in candidate_ids:
            keep = [ex for ex in D if ex.id != cid]
            final = train(base, keep, tc)[-1]
            deltas.append(_recorded_loss(final, queries) - full_loss)
        return np.asarray(deltas)

    # convex head
    phi, tgt, owner = _head_rows(tuned, D)
    qphi, qtgt, qowner = _head_rows(tuned, queries)
    inv_m = 1.0 / np.bincount(owner, minlength=len(D)).astype(np.float64)
    vocab = tuned.config.vocab_size

    def row_weights(drop_pos):
        w_ex = _content_weights(D, drop_pos)
        return (w_ex * inv_m)[owner]

    w_full = _fit_head(phi, tgt, row_weights(None), tuned.params["readout"],
                       vocab, HEAD_RIDGE, maxiter=2000)
    base_loss = _head_query_loss(w_full, qphi, qtgt, qowner, len(queries))
    deltas = []
    for cid in candidate_ids:
        pos = id_to_pos[cid]
        w_loo = _fit_head(phi, tgt, row_weights(pos), w_full, vocab, HEAD_RIDGE)
        deltas.append(_head_query_loss(w_loo, qphi, qtgt, qowner, len(queries))
                      - base_loss)
    return np.asarray(deltas)


def _recorded_loss(ckpt: Checkpoint, queries) -> float:
    from .model import mean_loss
    return mean_loss(ckpt, queries)


def head_checkpoint(cfg: ExperimentConfig, seed: int | None = None) -> Checkpoint:
    """Tuned checkpoint with its readout refit to the convex-head optimum.

    Influence computed at this checkpoint with layer_filter=["readout"] is the
    first-order prediction of what loo_oracle(mode="convex_head") measures.
    """
    runner = Runner(cfg)
    s = cfg.seeds[0] if seed is None else seed
    D = runner.stage_corpus(s)["train"]
    tuned = runner.tuned(s)
    phi, tgt, owner = _head_rows(tuned, D)
    inv_m = 1.0 / np.bincount(owner, minlength=len(D)).astype(np.float64)
    w_ex = _content_weights(D, None)
    w_full = _fit_head(phi, tgt, (w_ex * inv_m)[owner], tuned.params["readout"],
                       tuned.config.vocab_size, HEAD_RIDGE, maxiter=2000)
    out = tuned.copy()
    out.params["readout"] = w_full
    return out
