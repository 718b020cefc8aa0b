"""Eigenvalue-corrected Kronecker-factored curvature and inverse-Hessian products.

Curvature convention: Gauss-Newton/Fisher with targets drawn from the model's
own softmax, which keeps every factor PSD. Expectations over those sampled
targets are evaluated in closed form instead of by Monte Carlo draws: with
p the softmax and B = diag(p) - p p^T, the pre-activation gradient second
moment at a position is D^T B D, where D is the Jacobian of the logits with
respect to that layer's pre-activations. B factors exactly as C C^T with
C = diag(sqrt(p)) - p sqrt(p)^T, so everything reduces to dense matmuls.

Per layer (weights and bias folded into one matrix via an appended input 1):

    A = average over scored positions of abar abar^T      (input second moment)
    S = average over scored positions of D^T B D          (grad second moment)

The basis eigendecomposes A and S, then refits the diagonal: Lambda[i, j] is
the exact expected squared projection of a per-example gradient onto the
(i-th S eigenvector, j-th A eigenvector) pair, averaged over examples. Scored
positions are the ones whose next token is loss-masked in; per-example loss
normalization (1/m per example, hence 1/m^2 in second moments) enters Lambda
and the exact oracle identically, so the two sides stay comparable.

The exact oracle assembles the same Gauss-Newton matrix without the Kronecker
factorization (cross-layer blocks included) and solves (H + damping I) x = g
densely. It refuses to run above a parameter cap.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .container import read_container, write_container
from .errors import InputError, NumericError, RefusalError
from .model import (
    Checkpoint,
    _prediction_mask,
    batch_arrays,
    checkpoint_hash,
    forward_batch,
    resolve_layer_filter,
    softmax,
)

EXACT_PARAM_CAP = 5000


def _matmul_layers(config, layer_filter):
    names = resolve_layer_filter(config, layer_filter)
    if "embed" in names:
        raise InputError("curvature is defined for matmul layers only, not 'embed'")
    return names


def _curvature_pass(ckpt: Checkpoint, examples, names):
    """Per-batch quantities for every requested layer.

    Returns (per_layer, predmask, inv_m) where per_layer[name] = (abar, M):
    abar (B,T,in+1) layer inputs, M = C^T D (B,T,V,out) so that
    M^T M = D^T B D at each position.
    """
    cfg = ckpt.config
    tokens, valid, mask = batch_arrays(cfg, examples)
    logits, caches = forward_batch(ckpt, tokens)
    predmask = _prediction_mask(mask, valid)
    counts = predmask.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("example with no scored positions")
    p = softmax(logits)
    sqrtp = np.sqrt(p)
    B, T, V = p.shape

    # C = diag(sqrt(p)) - p sqrt(p)^T satisfies C C^T = diag(p) - p p^T
    C = -p[..., :, None] * sqrtp[..., None, :]
    ii = np.arange(V)
    C[..., ii, ii] += sqrtp

    # Jacobians of logits w.r.t. block outputs, walking the residual chain down
    need = {}
    jh = np.broadcast_to(ckpt.params["readout"][:, :-1], (B, T, V, cfg.embed_dim)).copy()
    for k in range(cfg.mlp_layers - 1, -1, -1):
        blk = caches["blocks"][k]
        w_in = ckpt.params[f"mlp{k}.fc_in"]
        w_out = ckpt.params[f"mlp{k}.fc_out"]
        name_out, name_in = f"mlp{k}.fc_out", f"mlp{k}.fc_in"
        if name_out in names:
            need[name_out] = (blk["zbar"], jh.copy())
        tanhp = 1.0 - blk["z"] ** 2
        d_in = np.einsum("btvd,dh,bth->btvh", jh, w_out[:, :-1], tanhp, optimize=True)
        if name_in in names:
            need[name_in] = (blk["abar"], d_in)
        jh = jh + np.einsum("btvh,hd->btvd", d_in, w_in[:, :-1], optimize=True)

    per_layer = {}
    for name in names:
        if name == "readout":
            abar, m_mat = caches["hbar"], np.swapaxes(C, -1, -2).copy()
        else:
            abar, d_mat = need[name]
            m_mat = np.einsum("btvw,btvo->btwo", C, d_mat, optimize=True)
        per_layer[name] = (abar, m_mat)
    return per_layer, predmask, 1.0 / counts.astype(np.float64)


class KroneckerFactors:
    """Per-layer A/S second-moment matrices plus the sample count behind them."""

    def __init__(self, layer_names, a_mats, s_mats, sample_count, ckpt_hash):
        self.layer_names = list(layer_names)
        self.A = a_mats
        self.S = s_mats
        self.sample_count = int(sample_count)
        self.checkpoint_hash = ckpt_hash
        for n in self.layer_names:
            for mat in (self.A[n], self.S[n]):
                if not np.allclose(mat, mat.T, atol=1e-10):
                    raise NumericError(f"factor for {n} is not symmetric")


def estimate_factors(ckpt: Checkpoint, data, layer_filter="mlp",
                     batch_size: int = 64) -> KroneckerFactors:
    """Average input and pre-activation-gradient second moments over `data`."""
    if not data:
        raise InputError("empty dataset")
    names = _matmul_layers(ckpt.config, layer_filter)
    a_sum = {n: None for n in names}
    s_sum = {n: None for n in names}
    total = 0
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        per_layer, predmask, _ = _curvature_pass(ckpt, chunk, names)
        sel = predmask
        total += int(sel.sum())
        for n in names:
            abar, m_mat = per_layer[n]
            a = abar[sel]                       # (n_sel, in+1)
            m = m_mat[sel]                      # (n_sel, V, out)
            a_part = a.T @ a
            s_part = np.einsum("svo,svq->oq", m, m, optimize=True)
            a_sum[n] = a_part if a_sum[n] is None else a_sum[n] + a_part
            s_sum[n] = s_part if s_sum[n] is None else s_sum[n] + s_part
    a_mats = {n: a_sum[n] / total for n in names}
    s_mats = {n: s_sum[n] / total for n in names}
    return KroneckerFactors(names, a_mats, s_mats, total, checkpoint_hash(ckpt))


class EkfacBasis:
    """Kronecker eigenbasis with refit diagonal and a single damping scalar."""

    def __init__(self, layer_names, q_a, q_s, lam, damping, ckpt_hash, config=None):
        self.layer_names = list(layer_names)
        self.q_a = q_a          # name -> (in+1, in+1) orthonormal
        self.q_s = q_s          # name -> (out, out) orthonormal
        self.lam = lam          # name -> (out, in+1), >= 0
        self.damping = float(damping)
        self.checkpoint_hash = ckpt_hash
        self.config = config
        if self.damping <= 0:
            raise NumericError("damping must be positive")
        for n in self.layer_names:
            if not np.isfinite(self.lam[n]).all():
                raise NumericError(f"non-finite eigenvalues in layer {n}")

    def layer_shapes(self):
        return {n: (self.q_s[n].shape[0], self.q_a[n].shape[0])
                for n in self.layer_names}

    def param_count(self):
        return sum(o * i for o, i in self.layer_shapes().values())

    def split(self, g: np.ndarray):
        """Partition a flat vector into per-layer matrices."""
        shapes = self.layer_shapes()
        expected = self.param_count()
        if g.shape != (expected,):
            raise InputError(f"vector has shape {g.shape}, expected ({expected},)")
        out, off = {}, 0
        for n in self.layer_names:
            o, i = shapes[n]
            out[n] = g[off : off + o * i].reshape(o, i)
            off += o * i
        return out


def fit_basis(factors: KroneckerFactors, ckpt: Checkpoint, data,
              damping: float | None = None, batch_size: int = 64) -> EkfacBasis:
    """Eigendecompose the factors and refit the diagonal on `data`.

    damping=None applies the default 0.1 * mean(Lambda) over all entries.
    """
    if factors.checkpoint_hash != checkpoint_hash(ckpt):
        raise InputError("factors were estimated at a different checkpoint")
    names = factors.layer_names
    q_a, q_s = {}, {}
    for n in names:
        evals_a, vecs_a = np.linalg.eigh(factors.A[n])
        evals_s, vecs_s = np.linalg.eigh(factors.S[n])
        if not (np.isfinite(evals_a).all() and np.isfinite(evals_s).all()):
            raise NumericError(f"non-finite eigenvalues for layer {n}")
        q_a[n], q_s[n] = vecs_a, vecs_s

    lam = {n: np.zeros((factors.S[n].shape[0], factors.A[n].shape[0])) for n in names}
    n_examples = 0
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        n_examples += len(chunk)
        per_layer, predmask, inv_m = _curvature_pass(ckpt, chunk, names)
        scale = predmask * (inv_m ** 2)[:, None]      # (B, T): 1/m^2 at scored t
        for n in names:
            abar, m_mat = per_layer[n]
            proj_a = (abar @ q_a[n]) ** 2             # (B, T, in+1)
            mq = np.einsum("btvo,op->btvp", m_mat, q_s[n], optimize=True)
            w = np.einsum("btvp,btvp->btp", mq, mq, optimize=True)
            lam[n] += np.einsum("bt,btp,bti->pi", scale, w, proj_a, optimize=True)
    lam = {n: np.maximum(lam[n] / n_examples, 0.0) for n in names}

    if damping is None:
        all_entries = np.concatenate([lam[n].ravel() for n in names])
        damping = 0.1 * float(all_entries.mean())
    return EkfacBasis(names, q_a, q_s, lam, damping, factors.checkpoint_hash,
                      config=ckpt.config)


def ihvp(basis: EkfacBasis, g: np.ndarray) -> np.ndarray:
    """(H_ekfac + damping I)^-1 g in the Kronecker eigenbasis, layer by layer."""
    parts = basis.split(np.asarray(g, dtype=np.float64))
    out = []
    for n in basis.layer_names:
        x = basis.q_s[n].T @ parts[n] @ basis.q_a[n]
        x = x / (basis.lam[n] + basis.damping)
        out.append((basis.q_s[n] @ x @ basis.q_a[n].T).ravel())
    return np.concatenate(out)


def ekfac_matvec(basis: EkfacBasis, v: np.ndarray, include_damping: bool = True):
    """(H_ekfac [+ damping I]) v, the explicit Kronecker reconstruction."""
    parts = basis.split(np.asarray(v, dtype=np.float64))
    out = []
    for n in basis.layer_names:
        x = basis.q_s[n].T @ parts[n] @ basis.q_a[n]
        lam = basis.lam[n] + (basis.damping if include_damping else 0.0)
        out.append((basis.q_s[n] @ (x * lam) @ basis.q_a[n].T).ravel())
    return np.concatenate(out)


# --- exact Gauss-Newton oracle ----------------------------------------------------

def assemble_fisher(ckpt: Checkpoint, data, layer_filter="mlp",
                    cap: int = EXACT_PARAM_CAP, batch_size: int = 32) -> np.ndarray:
    """Dense Gauss-Newton/Fisher over the filtered parameters, cross-layer
    blocks included. Same per-example 1/m^2 weighting as the basis refit."""
    if not data:
        raise InputError("empty dataset")
    names = _matmul_layers(ckpt.config, layer_filter)
    shapes = [(n,) + ckpt.config.layer_shape(n) for n in names]
    sizes = [o * i for _, o, i in shapes]
    total = sum(sizes)
    if total > cap:
        raise RefusalError(f"{total} filtered parameters exceed the exact-solve "
                           f"cap of {cap}")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    H = np.zeros((total, total))
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        per_layer, predmask, inv_m = _curvature_pass(ckpt, chunk, names)
        w = np.sqrt((predmask * (inv_m ** 2)[:, None])[predmask])   # (n_sel,)
        sel_a = {n: per_layer[n][0][predmask] for n in names}
        sel_m = {n: per_layer[n][1][predmask] for n in names}
        for i, n1 in enumerate(names):
            for j, n2 in enumerate(names):
                if j < i:
                    continue
                k_mat = np.einsum("svo,svq->soq", sel_m[n1], sel_m[n2], optimize=True)
                o_mat = np.einsum("si,sj->sij", sel_a[n1], sel_a[n2])
                block = np.einsum("s,soq,sij->oiqj", w * w, k_mat, o_mat,
                                  optimize=True)
                block = block.reshape(sizes[i], sizes[j])
                r0, r1 = offsets[i], offsets[i + 1]
                c0, c1 = offsets[j], offsets[j + 1]
                H[r0:r1, c0:c1] += block
                if j > i:
                    H[c0:c1, r0:r1] += block.T
    return H / len(data)


def damped_solve(H: np.ndarray, damping: float, g: np.ndarray) -> np.ndarray:
    """(H + damping I)^-1 g by a dense symmetric solve."""
    if damping < 0:
        raise InputError("damping must be >= 0")
    n = H.shape[0]
    if g.shape[-1] != n:
        raise InputError(f"vector length {g.shape[-1]} does not match H ({n})")
    return scipy.linalg.solve(H + damping * np.eye(n), np.asarray(g).T,
                              assume_a="pos").T


def exact_ihvp_oracle(ckpt: Checkpoint, data, damping: float, g: np.ndarray,
                      layer_filter="mlp", cap: int = EXACT_PARAM_CAP) -> np.ndarray:
    H = assemble_fisher(ckpt, data, layer_filter=layer_filter, cap=cap)
    return damped_solve(H, damping, g)


# --- basis persistence -------------------------------------------------------------

def save_basis(path, basis: EkfacBasis) -> str:
    meta = {
        "layer_names": basis.layer_names,
        "damping": basis.damping,
        "checkpoint_hash": basis.checkpoint_hash,
    }
    arrays = {}
    for n in basis.layer_names:
        arrays[f"{n}/q_a"] = basis.q_a[n]
        arrays[f"{n}/q_s"] = basis.q_s[n]
        arrays[f"{n}/lam"] = basis.lam[n]
    return write_container(path, "ekfac_basis", meta, arrays)


def load_basis(path) -> EkfacBasis:
    _, meta, arrays = read_container(path, expect_kind="ekfac_basis")
    names = meta["layer_names"]
    return EkfacBasis(
        names,
        {n: arrays[f"{n}/q_a"] for n in names},
        {n: arrays[f"{n}/q_s"] for n in names},
        {n: arrays[f"{n}/lam"] for n in names},
        meta["damping"],
        meta["checkpoint_hash"],
    )
