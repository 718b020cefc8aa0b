"""Small deterministic sequence model: embeddings, MLP blocks, analytic grads.

Architecture. Each position t is featurized causally from the last `window`
tokens: the current and preceding token embeddings are gated elementwise by
fixed sinusoidal offset vectors (one per relative offset) and summed, plus an
absolute sinusoidal position offset. The result runs through `mlp_layers`
residual tanh blocks and a linear readout over the vocabulary. There is no
attention; all learnable parameters are the embedding table, the per-block MLP
matrices, and the readout.

Every weight matrix except the embedding carries its bias as an extra input
column (homogeneous coordinates): `mlp{k}.fc_in` has shape (hidden, embed+1),
`mlp{k}.fc_out` has (embed, hidden+1), `readout` has (vocab, embed+1). That
makes each layer a plain matmul, which is what the curvature machinery
(ekfac module) assumes.

Loss. `forward_loss` returns logits where row t is the distribution predicting
the token at position t+1, and the loss is the mean cross-entropy over
positions whose loss_mask is True (completion tokens only). Position 0 can
never be a loss target.

The canonical flat parameter order is embed, mlp0.fc_in, mlp0.fc_out, ...,
readout, each matrix flattened row-major. `per_example_gradient` and the
curvature/influence modules all use this order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .container import pack, read_container, sha256_bytes
from .datagen import END_ID, Example, VOCAB_SIZE
from .errors import ConfigError, InputError, ParseError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    context_len: int = 32
    embed_dim: int = 32
    mlp_layers: int = 2
    hidden_dim: int = 64
    window: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "embed_dim", "mlp_layers",
                     "hidden_dim", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def layer_names(self) -> list[str]:
        names = ["embed"]
        for k in range(self.mlp_layers):
            names += [f"mlp{k}.fc_in", f"mlp{k}.fc_out"]
        names.append("readout")
        return names

    def mlp_layer_names(self) -> list[str]:
        return [n for n in self.layer_names() if n.startswith("mlp")]

    def layer_shape(self, name: str) -> tuple[int, int]:
        v, d, h = self.vocab_size, self.embed_dim, self.hidden_dim
        if name == "embed":
            return (v, d)
        if name == "readout":
            return (v, d + 1)
        if name.startswith("mlp"):
            k = name.split(".")[0][len("mlp"):]
            if k.isdigit() and int(k) < self.mlp_layers:
                if name.endswith(".fc_in"):
                    return (h, d + 1)
                if name.endswith(".fc_out"):
                    return (d, h + 1)
        raise InputError(f"unknown layer {name!r}")

    def param_count(self) -> int:
        return sum(int(np.prod(self.layer_shape(n))) for n in self.layer_names())


@dataclass
class Checkpoint:
    """Immutable-by-convention parameter snapshot."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    epoch: int = 0

    def __post_init__(self):
        want = self.config.layer_names()
        if list(self.params.keys()) != want:
            raise InputError(f"params must carry layers {want} in order")
        for name in want:
            shape = self.config.layer_shape(name)
            if self.params[name].shape != shape:
                raise InputError(f"layer {name}: expected shape {shape}, "
                                 f"got {self.params[name].shape}")
        if self.epoch < 0:
            raise InputError("epoch must be >= 0")

    def copy(self, epoch: int | None = None) -> "Checkpoint":
        return Checkpoint(self.config,
                          {k: v.copy() for k, v in self.params.items()},
                          self.epoch if epoch is None else epoch)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    peak_lr: float = 1e-2
    schedule: str = "cosine"
    batch_size: int = 32
    snapshot_every: int = 2
    warmup_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.schedule != "cosine":
            raise ConfigError("only the cosine schedule is supported")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.snapshot_every < 1 or self.epochs % self.snapshot_every != 0:
            raise ConfigError("snapshot_every must divide epochs")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = 0          # 0 disables top-k
    max_new_tokens: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")


# --- fixed positional structure ------------------------------------------------

def _sinusoid_table(rows: int, dim: int, base: float) -> np.ndarray:
    """Classic sin/cos interleave: out[r, 2i] = sin(r * w_i), out[r, 2i+1] = cos."""
    pos = np.arange(rows, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(base, 2.0 * (idx // 2) / dim)
    out = np.empty((rows, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles[:, 0::2])
    out[:, 1::2] = np.cos(angles[:, 1::2])
    return out


def position_offsets(config: ModelConfig) -> np.ndarray:
    """(context_len, embed_dim) absolute offsets added to every position."""
    return _sinusoid_table(config.context_len, config.embed_dim, 10000.0)


def window_gates(config: ModelConfig) -> np.ndarray:
    """(window, embed_dim) elementwise gates tagging each relative offset.

    Offset 0 (the current token) passes through ungated so the most recent
    token is always fully visible; earlier offsets get distinct bounded
    sinusoidal patterns that an MLP can separate.
    """
    gates = _sinusoid_table(config.window, config.embed_dim, 50.0)
    gates[0, :] = 1.0
    return gates


# --- init / parameter plumbing --------------------------------------------------

def init_model(config: ModelConfig) -> Checkpoint:
    """Deterministic initialization: same config and seed, same bits."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    d, h = config.embed_dim, config.hidden_dim
    params["embed"] = rng.normal(0.0, 0.5, size=(config.vocab_size, d))
    for k in range(config.mlp_layers):
        w_in = rng.normal(0.0, 1.0 / math.sqrt(d + 1), size=(h, d + 1))
        w_in[:, -1] = 0.0
        w_out = rng.normal(0.0, 1.0 / math.sqrt(h + 1), size=(d, h + 1))
        w_out[:, -1] = 0.0
        params[f"mlp{k}.fc_in"] = w_in
        params[f"mlp{k}.fc_out"] = w_out
    readout = rng.normal(0.0, 1.0 / math.sqrt(d + 1), size=(config.vocab_size, d + 1))
    readout[:, -1] = 0.0
    params["readout"] = readout
    return Checkpoint(config, params, epoch=0)


def resolve_layer_filter(config: ModelConfig, layer_filter) -> list[str]:
    """Normalize a layer filter to canonical order. "mlp" means all MLP layers."""
    if layer_filter is None or layer_filter == "mlp":
        return config.mlp_layer_names()
    if layer_filter == "all":
        return config.layer_names()
    wanted = set(layer_filter)
    known = config.layer_names()
    unknown = wanted - set(known)
    if unknown:
        raise InputError(f"unknown layer name(s) {sorted(unknown)}")
    return [n for n in known if n in wanted]


def flat_params(ckpt: Checkpoint, layer_filter=None) -> np.ndarray:
    names = resolve_layer_filter(ckpt.config, layer_filter)
    return np.concatenate([ckpt.params[n].ravel() for n in names])


def with_flat_params(ckpt: Checkpoint, flat: np.ndarray, layer_filter=None) -> Checkpoint:
    """New checkpoint with the filtered layers replaced by `flat`."""
    names = resolve_layer_filter(ckpt.config, layer_filter)
    out = ckpt.copy()
    off = 0
    for n in names:
        shape = ckpt.config.layer_shape(n)
        size = int(np.prod(shape))
        out.params[n] = np.asarray(flat[off:off + size], dtype=np.float64).reshape(shape)
        off += size
    if off != flat.size:
        raise InputError(f"flat vector has {flat.size} entries, expected {off}")
    return out


def layer_slices(config: ModelConfig, layer_filter=None) -> dict[str, slice]:
    names = resolve_layer_filter(config, layer_filter)
    out, off = {}, 0
    for n in names:
        size = int(np.prod(config.layer_shape(n)))
        out[n] = slice(off, off + size)
        off += size
    return out


# --- batched forward / backward --------------------------------------------------

def _append_ones(x: np.ndarray) -> np.ndarray:
    pad = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    return np.concatenate([x, pad], axis=-1)


def _validate_tokens(config: ModelConfig, tokens: np.ndarray):
    if tokens.size and int(tokens.max()) >= config.vocab_size:
        raise InputError(f"token id {int(tokens.max())} >= vocab_size {config.vocab_size}")
    if tokens.size and int(tokens.min()) < 0:
        raise InputError("negative token id")
    if tokens.shape[-1] > config.context_len:
        raise InputError(f"sequence length {tokens.shape[-1]} exceeds "
                         f"context_len {config.context_len}")


def forward_batch(ckpt: Checkpoint, tokens: np.ndarray, want_caches: bool = True):
    """Run the model on (B, T) token ids; returns dict with logits and caches.

    Caches: h0 (B,T,d) pre-block features, and per block abar (B,T,d+1) input
    with appended 1, z (B,T,h) tanh activations, zbar; hbar (B,T,d+1) readout
    input. Positions past a sequence's true end are junk for the caller to
    mask out; padding must be at the tail so causal windows never see it.
    """
    cfg = ckpt.config
    _validate_tokens(cfg, tokens)
    B, T = tokens.shape
    E = ckpt.params["embed"]
    gates = window_gates(cfg)
    pos = position_offsets(cfg)

    h = np.broadcast_to(pos[:T], (B, T, cfg.embed_dim)).copy()
    emb = E[tokens]                                     # (B, T, d)
    for j in range(min(cfg.window, T)):
        h[:, j:, :] += gates[j] * emb[:, : T - j, :]

    caches = {"tokens": tokens, "h0": h.copy()} if want_caches else {}
    blocks = []
    for k in range(cfg.mlp_layers):
        w_in = ckpt.params[f"mlp{k}.fc_in"]
        w_out = ckpt.params[f"mlp{k}.fc_out"]
        abar = _append_ones(h)
        u = abar @ w_in.T
        z = np.tanh(u)
        zbar = _append_ones(z)
        h = h + zbar @ w_out.T
        if want_caches:
            blocks.append({"abar": abar, "z": z, "zbar": zbar})
    hbar = _append_ones(h)
    logits = hbar @ ckpt.params["readout"].T
    if want_caches:
        caches["blocks"] = blocks
        caches["hbar"] = hbar
        caches["logits"] = logits
    return logits, caches


def softmax(logits: np.ndarray) -> np.ndarray:
    x = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _prediction_mask(mask_rows: np.ndarray, valid_rows: np.ndarray) -> np.ndarray:
    """predmask[b, t] is True when logits row t is scored against token t+1."""
    B, T = mask_rows.shape
    pred = np.zeros((B, T), dtype=bool)
    pred[:, : T - 1] = mask_rows[:, 1:] & valid_rows[:, 1:]
    return pred


def masked_ce_loss(logits: np.ndarray, targets: np.ndarray, predmask: np.ndarray):
    """Per-sequence mean CE over predmask positions.

    logits (B,T,V); targets[b,t] is the token that logits row t predicts;
    entries of targets outside predmask are ignored entirely.
    """
    counts = predmask.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("loss mask selects no completion positions")
    x = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1))
    tgt = np.take_along_axis(x, np.clip(targets, 0, None)[..., None], axis=-1)[..., 0]
    nll = np.where(predmask, lse - tgt, 0.0)
    return nll.sum(axis=1) / counts


def batch_arrays(config: ModelConfig, examples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad a list of Examples to (tokens, valid, mask) arrays."""
    if not examples:
        raise InputError("empty example batch")
    T = max(len(ex.tokens) for ex in examples)
    B = len(examples)
    tokens = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    mask = np.zeros((B, T), dtype=bool)
    for i, ex in enumerate(examples):
        seq = ex.tokens
        tokens[i, : len(seq)] = seq
        valid[i, : len(seq)] = True
        mask[i, : len(seq)] = ex.loss_mask
    if np.any(mask[:, 0]):
        raise InputError("position 0 cannot be a loss target")
    return tokens, valid, mask


def forward_loss(ckpt: Checkpoint, example: Example):
    """(logits, loss): logits row t predicts token t+1; loss is the mean CE
    over mask-True positions. Prompt positions contribute nothing."""
    tokens, valid, mask = batch_arrays(ckpt.config, [example])
    logits, _ = forward_batch(ckpt, tokens, want_caches=False)
    predmask = _prediction_mask(mask, valid)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    loss = masked_ce_loss(logits, targets, predmask)
    return logits[0], float(loss[0])


def _backward_from_dlogits(ckpt: Checkpoint, caches, dlogits, need_embed: bool):
    """Backprop given d(loss)/d(logits); returns dict of per-layer gradients."""
    cfg = ckpt.config
    grads = {}
    grads["readout"] = np.einsum("btv,bti->vi", dlogits, caches["hbar"])
    dh = dlogits @ ckpt.params["readout"][:, :-1]
    for k in range(cfg.mlp_layers - 1, -1, -1):
        blk = caches["blocks"][k]
        w_in = ckpt.params[f"mlp{k}.fc_in"]
        w_out = ckpt.params[f"mlp{k}.fc_out"]
        dr = dh
        grads[f"mlp{k}.fc_out"] = np.einsum("btd,bth->dh", dr, blk["zbar"])
        dz = dr @ w_out[:, :-1]
        du = dz * (1.0 - blk["z"] ** 2)
        grads[f"mlp{k}.fc_in"] = np.einsum("bth,bti->hi", du, blk["abar"])
        dh = dh + du @ w_in[:, :-1]
    if need_embed:
        tokens = caches["tokens"]
        gates = window_gates(cfg)
        B, T = tokens.shape
        dE = np.zeros_like(ckpt.params["embed"])
        for j in range(min(cfg.window, T)):
            contrib = (gates[j] * dh[:, j:, :]).reshape(-1, cfg.embed_dim)
            np.add.at(dE, tokens[:, : T - j].reshape(-1), contrib)
        grads["embed"] = dE
    return grads


def _dlogits_for_loss(logits, tokens, predmask, per_example_scale):
    """(softmax - onehot) at scored positions, scaled per sequence."""
    p = softmax(logits)
    d = p.copy()
    B, T, V = logits.shape
    rows = np.zeros((B, T), dtype=np.float64)
    rows[predmask] = 1.0
    tgt = np.zeros((B, T), dtype=np.int64)
    tgt[:, : T - 1] = tokens[:, 1:]
    onehot_idx = np.eye(V, dtype=np.float64)[tgt]
    d = (d - onehot_idx) * rows[..., None]
    return d * per_example_scale[:, None, None]


def loss_and_grads(ckpt: Checkpoint, examples, layer_filter="all"):
    """Mean per-example loss over the batch and its gradient (dict by layer)."""
    names = resolve_layer_filter(ckpt.config, layer_filter)
    tokens, valid, mask = batch_arrays(ckpt.config, examples)
    logits, caches = forward_batch(ckpt, tokens)
    predmask = _prediction_mask(mask, valid)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    losses = masked_ce_loss(logits, targets, predmask)
    counts = predmask.sum(axis=1).astype(np.float64)
    scale = 1.0 / (counts * len(examples))
    dlogits = _dlogits_for_loss(logits, tokens, predmask, scale)
    grads = _backward_from_dlogits(ckpt, caches, dlogits, need_embed="embed" in names)
    return float(losses.mean()), {n: grads[n] for n in names}


def per_example_gradient(ckpt: Checkpoint, example: Example, layer_filter="mlp") -> np.ndarray:
    """Analytic gradient of forward_loss w.r.t. the filtered parameters,
    flattened in canonical layer order."""
    names = resolve_layer_filter(ckpt.config, layer_filter)
    _, grads = loss_and_grads(ckpt, [example], layer_filter=names)
    return np.concatenate([grads[n].ravel() for n in names])


# --- training --------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, tc: TrainConfig) -> float:
    """Warmup (optional) then cosine anneal from peak to zero."""
    warm = int(round(tc.warmup_frac * total_steps))
    if warm > 0 and step < warm:
        return tc.peak_lr * (step + 1) / warm
    span = max(total_steps - warm, 1)
    t = (step - warm) / span
    return tc.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def train(ckpt: Checkpoint, data, tc: TrainConfig):
    """Plain SGD with cosine schedule; returns checkpoints at every
    snapshot_every epochs (the final epoch always included)."""
    if not data:
        raise InputError("empty dataset")
    current = ckpt.copy()
    rng = np.random.default_rng(tc.seed)
    n = len(data)
    steps_per_epoch = (n + tc.batch_size - 1) // tc.batch_size
    total_steps = steps_per_epoch * tc.epochs
    series = []
    step = 0
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            batch = [data[i] for i in order[start : start + tc.batch_size]]
            _, grads = loss_and_grads(current, batch, layer_filter="all")
            lr = cosine_lr(step, total_steps, tc)
            for name, g in grads.items():
                current.params[name] -= lr * g
            step += 1
        if epoch % tc.snapshot_every == 0 or epoch == tc.epochs:
            series.append(current.copy(epoch=ckpt.epoch + epoch))
    return series


def mean_loss(ckpt: Checkpoint, data, batch_size: int = 256) -> float:
    """Mean per-example forward_loss over a dataset."""
    if not data:
        raise InputError("empty dataset")
    total = 0.0
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        tokens, valid, mask = batch_arrays(ckpt.config, chunk)
        logits, _ = forward_batch(ckpt, tokens, want_caches=False)
        predmask = _prediction_mask(mask, valid)
        targets = np.zeros_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        total += masked_ce_loss(logits, targets, predmask).sum()
    return float(total / len(data))


# --- decoding --------------------------------------------------------------------

def _step_features(ckpt: Checkpoint, buffers: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Features of the last position of each sequence, (B, d)."""
    cfg = ckpt.config
    E = ckpt.params["embed"]
    gates = window_gates(cfg)
    pos = position_offsets(cfg)
    B = buffers.shape[0]
    last = lengths - 1
    h = pos[last].copy()
    for j in range(cfg.window):
        idx = last - j
        live = idx >= 0
        if not live.any():
            break
        toks = buffers[np.arange(B), np.clip(idx, 0, None)]
        h[live] += gates[j] * E[toks[live]]
    return h


def _positionwise_logits(ckpt: Checkpoint, h: np.ndarray) -> np.ndarray:
    cfg = ckpt.config
    for k in range(cfg.mlp_layers):
        abar = _append_ones(h)
        z = np.tanh(abar @ ckpt.params[f"mlp{k}.fc_in"].T)
        h = h + _append_ones(z) @ ckpt.params[f"mlp{k}.fc_out"].T
    return _append_ones(h) @ ckpt.params["readout"].T


def _filter_probs(logits: np.ndarray, temperature: float, top_k: int, top_p: float):
    """Temperature, then top-k, then top-p; returns per-row probabilities."""
    x = logits / temperature
    p = softmax(x)
    if top_k > 0 and top_k < p.shape[-1]:
        order = np.argsort(-p, axis=-1, kind="stable")
        keep = np.zeros_like(p, dtype=bool)
        np.put_along_axis(keep, order[:, :top_k], True, axis=-1)
        p = np.where(keep, p, 0.0)
        p = p / p.sum(axis=-1, keepdims=True)
    if top_p < 1.0:
        order = np.argsort(-p, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(p, order, axis=-1)
        csum = np.cumsum(sorted_p, axis=-1)
        # keep the minimal prefix whose mass reaches top_p (crossing token kept)
        cut = csum - sorted_p < top_p
        keep = np.zeros_like(p, dtype=bool)
        np.put_along_axis(keep, order, cut, axis=-1)
        p = np.where(keep, p, 0.0)
        p = p / p.sum(axis=-1, keepdims=True)
    return p


def decode_batch(ckpt: Checkpoint, prompts, mode: str = "greedy",
                 sampling: SamplingConfig | None = None,
                 rngs=None, end_token: int | None = None):
    """Decode one completion per prompt; prompts may have ragged lengths.

    In sampled mode each row draws from its own rng (callers pass `rngs`,
    one per prompt) so results do not depend on batch composition.
    """
    cfg = ckpt.config
    sampling = sampling or SamplingConfig()
    end = END_ID if end_token is None else end_token
    B = len(prompts)
    lens = np.array([len(p) for p in prompts], dtype=np.int64)
    if np.any(lens == 0):
        raise InputError("empty prompt")
    if np.any(lens > cfg.context_len):
        raise InputError("prompt exceeds context_len")
    greedy = mode == "greedy" or sampling.temperature == 0.0
    if not greedy and rngs is None:
        raise InputError("sampled decoding needs one rng per prompt")
    budget = cfg.context_len if sampling.max_new_tokens is None \
        else sampling.max_new_tokens
    buffers = np.zeros((B, cfg.context_len), dtype=np.int64)
    for i, p in enumerate(prompts):
        _validate_tokens(cfg, np.asarray(p, dtype=np.int64))
        buffers[i, : len(p)] = p
    done = np.zeros(B, dtype=bool)
    completions = [[] for _ in range(B)]
    for _ in range(budget):
        active = ~done & (lens < cfg.context_len)
        if not active.any():
            break
        h = _step_features(ckpt, buffers, lens)
        logits = _positionwise_logits(ckpt, h)
        if greedy:
            nxt = np.argmax(logits, axis=-1)
        else:
            probs = _filter_probs(logits, sampling.temperature,
                                  sampling.top_k, sampling.top_p)
            csum = np.cumsum(probs, axis=-1)
            nxt = np.empty(B, dtype=np.int64)
            for i in range(B):
                if active[i]:
                    u = rngs[i].random()
                    nxt[i] = min(int(np.searchsorted(csum[i], u, side="right")),
                                 probs.shape[-1] - 1)
                else:
                    nxt[i] = 0
        for i in range(B):
            if active[i]:
                completions[i].append(int(nxt[i]))
                buffers[i, lens[i]] = nxt[i]
        lens = lens + active.astype(np.int64)
        done |= active & (nxt == end)
    return completions


def decode(ckpt: Checkpoint, prompt, mode: str = "greedy",
           sampling: SamplingConfig | None = None, n: int = 1):
    """Greedy (deterministic, one completion) or sampled (n independent draws,
    temperature -> top-k -> top-p). Stops at the end token or length budget."""
    sampling = sampling or SamplingConfig()
    if mode not in ("greedy", "sampled"):
        raise InputError(f"unknown decode mode {mode!r}")
    if mode == "greedy":
        return decode_batch(ckpt, [list(prompt)], mode="greedy", sampling=sampling)
    if n <= 0:
        raise InputError("sampled mode needs n >= 1")
    rng = np.random.default_rng(sampling.seed)
    rngs = [np.random.default_rng(rng.integers(0, 2**63 - 1)) for _ in range(n)]
    return decode_batch(ckpt, [list(prompt)] * n, mode="sampled",
                        sampling=sampling, rngs=rngs)


# --- checkpoint I/O ---------------------------------------------------------------

def _checkpoint_blob(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": {
            "vocab_size": ckpt.config.vocab_size,
            "context_len": ckpt.config.context_len,
            "embed_dim": ckpt.config.embed_dim,
            "mlp_layers": ckpt.config.mlp_layers,
            "hidden_dim": ckpt.config.hidden_dim,
            "window": ckpt.config.window,
            "seed": ckpt.config.seed,
        },
        "epoch": ckpt.epoch,
        "layer_order": ckpt.config.layer_names(),
    }
    return pack("checkpoint", meta, dict(ckpt.params))


def checkpoint_hash(ckpt: Checkpoint) -> str:
    return sha256_bytes(_checkpoint_blob(ckpt))


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    blob = _checkpoint_blob(ckpt)
    with open(path, "wb") as f:
        f.write(blob)
    return sha256_bytes(blob)


def load_checkpoint(path) -> Checkpoint:
    kind, meta, arrays = read_container(path, expect_kind="checkpoint")
    config = ModelConfig(**meta["config"])
    if meta["layer_order"] != config.layer_names():
        raise ParseError("layer order in file does not match config")
    params = {n: arrays[n] for n in meta["layer_order"]}
    return Checkpoint(config, params, epoch=int(meta["epoch"]))
