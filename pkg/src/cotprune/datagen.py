"""Synthetic chain-arithmetic corpus with step-by-step completions.

Each task is a chain of additions over single-digit operands, reduced mod m.
The prompt spells out the chain ("3 + 5 + 2 ="), the completion walks through
every intermediate step and ends with an answer marker:

    3 + 5 : 8 ; 8 + 2 : 0 ; answer 0 <end>

A configurable fraction of *training* examples carries a planted corruption,
either flipping only the final answer token or breaking one intermediate step
and propagating the error downstream. Validation examples are never corrupted,
and `gold_answer` always records the true result.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, InputError, ParseError

log = logging.getLogger(__name__)

# Fixed closed vocabulary. Order is part of the on-disk contract: token ids in
# JSONL corpora and checkpoint embeddings index into this list.
SYMBOLS = (
    "<pad>", "<end>", "answer", "+", "-", "*", "=", ":", ";",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
)
_SYM_TO_ID = {s: i for i, s in enumerate(SYMBOLS)}

PAD_ID = _SYM_TO_ID["<pad>"]
END_ID = _SYM_TO_ID["<end>"]
ANSWER_ID = _SYM_TO_ID["answer"]

VOCAB_SIZE = len(SYMBOLS)

WRONG_FINAL = "wrong_final_answer"
WRONG_STEP = "wrong_intermediate_step"


def vocab_size() -> int:
    return VOCAB_SIZE


def tokenize(text) -> list[int]:
    """Map a symbol sequence (space-separated string or list) to token ids."""
    symbols = text.split() if isinstance(text, str) else list(text)
    ids = []
    for s in symbols:
        if s not in _SYM_TO_ID:
            raise InputError(f"unknown symbol {s!r}")
        ids.append(_SYM_TO_ID[s])
    return ids


def detokenize(ids) -> str:
    out = []
    for i in ids:
        if not 0 <= int(i) < VOCAB_SIZE:
            raise InputError(f"token id {i} outside vocabulary")
        out.append(SYMBOLS[int(i)])
    return " ".join(out)


def digit_token(value: int) -> int:
    """Token id of a single digit 0..9."""
    if not 0 <= value <= 9:
        raise InputError(f"value {value} is not a single digit")
    return _SYM_TO_ID[str(value)]


@dataclass
class Example:
    """One prompt/completion pair with a completion-only loss mask."""

    id: int
    prompt_tokens: list[int]
    completion_tokens: list[int]
    loss_mask: list[bool]
    gold_answer: str
    corrupted: bool = False
    corruption_mode: str | None = None

    def __post_init__(self):
        np_, nc = len(self.prompt_tokens), len(self.completion_tokens)
        if len(self.loss_mask) != np_ + nc:
            raise InputError("loss_mask length must equal prompt + completion length")
        if any(self.loss_mask[:np_]) or not all(self.loss_mask[np_:]):
            raise InputError("loss_mask must be False on prompt and True on completion")

    @property
    def tokens(self) -> list[int]:
        return self.prompt_tokens + self.completion_tokens


Dataset = list  # list[Example]


@dataclass
class TaskSpec:
    """Chain-arithmetic corpus descriptor. Operands stay single-digit symbols."""

    operand_min: int = 0
    operand_max: int = 9
    chain_depth: int = 4
    modulus: int = 10
    n_train: int = 1000
    n_val: int = 200
    n_heldout: int = 0
    corruption_rate: float = 0.0
    corruption_mode: str = WRONG_STEP
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.operand_min <= self.operand_max <= 9:
            raise ConfigError("operands must satisfy 0 <= min <= max <= 9")
        if self.chain_depth < 2:
            raise ConfigError("chain_depth must be >= 2")
        if not 2 <= self.modulus <= 10:
            raise ConfigError("modulus must be in [2, 10] (answers stay one digit)")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError("corruption_rate must lie in [0, 1]")
        if self.corruption_mode not in (WRONG_FINAL, WRONG_STEP):
            raise ConfigError(f"unknown corruption_mode {self.corruption_mode!r}")
        if self.n_val < 0 or self.n_heldout < 0:
            raise ConfigError("split sizes must be nonnegative")


def _chain_steps(operands: list[int], modulus: int) -> list[tuple[int, int, int]]:
    """Left-fold the chain; returns (left, right, result) per step."""
    steps = []
    acc = operands[0]
    for nxt in operands[1:]:
        res = (acc + nxt) % modulus
        steps.append((acc, nxt, res))
        acc = res
    return steps


def _render(operands: list[int], steps: list[tuple[int, int, int]], answer: int):
    prompt = []
    for i, a in enumerate(operands):
        if i:
            prompt.append(_SYM_TO_ID["+"])
        prompt.append(digit_token(a))
    prompt.append(_SYM_TO_ID["="])

    completion = []
    for left, right, res in steps:
        completion += [digit_token(left), _SYM_TO_ID["+"], digit_token(right),
                       _SYM_TO_ID[":"], digit_token(res), _SYM_TO_ID[";"]]
    completion += [ANSWER_ID, digit_token(answer), END_ID]
    return prompt, completion


def _corrupt(operands, steps, gold, mode, rng, modulus):
    """Return (steps', answer') after planting one error.

    Intermediate-step corruption applies a fixed off-by-one to the chosen
    step: a systematic misconception, so corrupted examples collectively
    teach one coherent wrong rule instead of uncorrelated noise.
    """
    if mode == WRONG_FINAL:
        delta = int(rng.integers(1, modulus))
        return steps, (gold + delta) % modulus
    # wrong intermediate step: break the first step and recompute everything
    # downstream; fixing the position keeps the misconception learnable
    n_steps = len(steps)
    bad = 0
    delta = 1
    new_steps = list(steps[:bad])
    left, right, res = steps[bad]
    acc = (res + delta) % modulus
    new_steps.append((left, right, acc))
    for i in range(bad + 1, n_steps):
        _, right, _ = steps[i]
        res = (acc + right) % modulus
        new_steps.append((acc, right, res))
        acc = res
    return new_steps, acc


def _sample_chains(spec: TaskSpec, count: int, rng) -> np.ndarray:
    """Sample `count` operand tuples, distinct when the chain space allows."""
    radix = spec.operand_max - spec.operand_min + 1
    total = radix ** spec.chain_depth
    if count <= total:
        if total <= 2_000_000:
            picks = rng.choice(total, size=count, replace=False)
        else:
            seen, picks = set(), []
            while len(picks) < count:
                c = int(rng.integers(0, total))
                if c not in seen:
                    seen.add(c)
                    picks.append(c)
            picks = np.asarray(picks)
    else:
        log.warning("requested %d chains but only %d distinct exist; sampling "
                    "with replacement", count, total)
        picks = rng.integers(0, total, size=count)
    # unrank each index into operand digits
    out = np.empty((count, spec.chain_depth), dtype=np.int64)
    rem = np.asarray(picks, dtype=np.int64)
    for pos in range(spec.chain_depth - 1, -1, -1):
        out[:, pos] = rem % radix + spec.operand_min
        rem //= radix
    return out


def _build_example(idx, operands, spec, corrupt_rng=None):
    operands = [int(a) for a in operands]
    steps = _chain_steps(operands, spec.modulus)
    gold = steps[-1][2]
    corrupted = corrupt_rng is not None
    mode = spec.corruption_mode if corrupted else None
    if corrupted:
        steps, answer = _corrupt(operands, steps, gold, mode, corrupt_rng, spec.modulus)
    else:
        answer = gold
    prompt, completion = _render(operands, steps, answer)
    mask = [False] * len(prompt) + [True] * len(completion)
    return Example(idx, prompt, completion, mask, str(gold), corrupted, mode)


def _pick_corrupt_ids(spec: TaskSpec, chains, rng) -> set[int]:
    """Deterministically choose exactly round(rate * n_train) victims.

    Intermediate-step corruption clusters on a systematic input class: every
    chain whose first-step sum ends in one rng-chosen digit, topped up (or
    thinned) at random to hit the exact count. Wrong-final corruption picks
    victims uniformly.
    """
    n_corrupt = int(round(spec.corruption_rate * spec.n_train))
    if n_corrupt == 0:
        return set()
    if spec.corruption_mode == WRONG_FINAL:
        return set(int(i) for i in
                   rng.choice(spec.n_train, size=n_corrupt, replace=False))
    target_digit = int(rng.integers(0, spec.modulus))
    first_sum = (chains[: spec.n_train, 0] + chains[: spec.n_train, 1]) % spec.modulus
    matching = np.flatnonzero(first_sum == target_digit)
    rest = np.flatnonzero(first_sum != target_digit)
    if len(matching) >= n_corrupt:
        picks = rng.choice(matching, size=n_corrupt, replace=False)
    else:
        extra = rng.choice(rest, size=n_corrupt - len(matching), replace=False)
        picks = np.concatenate([matching, extra])
    return set(int(i) for i in picks)


def generate_splits(spec: TaskSpec):
    """Deterministically build (train, val, heldout) with disjoint chains."""
    if spec.n_train <= 0:
        raise InputError("n_train must be positive")
    rng_chains = np.random.default_rng([spec.seed, 0])
    rng_corrupt = np.random.default_rng([spec.seed, 1])
    need = spec.n_train + spec.n_val + spec.n_heldout
    chains = _sample_chains(spec, need, rng_chains)

    corrupt_ids = _pick_corrupt_ids(spec, chains, rng_corrupt)

    train = [
        _build_example(i, chains[i], spec,
                       corrupt_rng=rng_corrupt if i in corrupt_ids else None)
        for i in range(spec.n_train)
    ]
    val = [
        _build_example(i, chains[spec.n_train + i], spec)
        for i in range(spec.n_val)
    ]
    heldout = [
        _build_example(i, chains[spec.n_train + spec.n_val + i], spec)
        for i in range(spec.n_heldout)
    ]
    return train, val, heldout


def generate_corpus(spec: TaskSpec):
    """(train, val) splits; see generate_splits for the held-out variant."""
    train, val, _ = generate_splits(spec)
    return train, val


def max_sequence_length(dataset) -> int:
    return max(len(ex.tokens) for ex in dataset) if dataset else 0


# --- JSONL corpus I/O ---------------------------------------------------------

_FIELDS = ("id", "prompt_tokens", "completion_tokens", "loss_mask",
           "gold_answer", "corrupted", "corruption_mode")


def write_corpus(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = asdict(ex)
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_corpus(path):
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"bad JSON ({e.msg})", line=lineno) from e
            missing = [k for k in _FIELDS if k not in rec]
            if missing:
                raise ParseError(f"missing fields {missing}", line=lineno)
            try:
                examples.append(Example(
                    id=int(rec["id"]),
                    prompt_tokens=[int(t) for t in rec["prompt_tokens"]],
                    completion_tokens=[int(t) for t in rec["completion_tokens"]],
                    loss_mask=[bool(b) for b in rec["loss_mask"]],
                    gold_answer=str(rec["gold_answer"]),
                    corrupted=bool(rec["corrupted"]),
                    corruption_mode=rec["corruption_mode"],
                ))
            except (TypeError, ValueError, InputError) as e:
                raise ParseError(str(e), line=lineno) from e
    return examples
