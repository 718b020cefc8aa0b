import numpy as np
import pytest

from conftest import make_example
from cotprune import datagen as dg
from cotprune import ekfac as ek
from cotprune import model as md
from cotprune.errors import InputError, NumericError, RefusalError


def brute_force_factors(ckpt, examples, names):
    """Replicate the A/S definitions directly from forward caches."""
    a_sum = {n: 0.0 for n in names}
    s_sum = {n: 0.0 for n in names}
    total = 0
    for ex in examples:
        per_layer, predmask, _ = ek._curvature_pass(ckpt, [ex], names)
        sel = predmask[0]
        total += int(sel.sum())
        for n in names:
            abar, m_mat = per_layer[n]
            for t in np.where(sel)[0]:
                a = abar[0, t]
                a_sum[n] = a_sum[n] + np.outer(a, a)
                m = m_mat[0, t]
                s_sum[n] = s_sum[n] + m.T @ m
    return ({n: a_sum[n] / total for n in names},
            {n: s_sum[n] / total for n in names})


@pytest.fixture(scope="module")
def factor_setup(trained_small, small_corpus):
    train, _ = small_corpus
    data = train[:24]
    factors = ek.estimate_factors(trained_small, data, "mlp")
    return trained_small, data, factors


@pytest.fixture(scope="module")
def basis_setup(factor_setup):
    ckpt, data, factors = factor_setup
    return ckpt, data, ek.fit_basis(factors, ckpt, data, damping=None)


# --- factor estimation -----------------------------------------------------------

def test_outer_product_average_rule():
    # two activation samples [1,0] and [0,1] average to [[0.5,0],[0,0.5]]
    samples = np.array([[1.0, 0.0], [0.0, 1.0]])
    avg = sum(np.outer(s, s) for s in samples) / len(samples)
    assert np.allclose(avg, [[0.5, 0.0], [0.0, 0.5]])


def test_factors_match_definition(factor_setup):
    ckpt, data, factors = factor_setup
    a_ref, s_ref = brute_force_factors(ckpt, data, factors.layer_names)
    for n in factors.layer_names:
        assert np.allclose(factors.A[n], a_ref[n], atol=1e-12)
        assert np.allclose(factors.S[n], s_ref[n], atol=1e-12)


def test_factors_duplication_invariant(factor_setup):
    ckpt, data, factors = factor_setup
    doubled = ek.estimate_factors(ckpt, data + data, "mlp")
    for n in factors.layer_names:
        assert np.allclose(factors.A[n], doubled.A[n], atol=1e-12)
        assert np.allclose(factors.S[n], doubled.S[n], atol=1e-12)


def test_factors_symmetric_psd(factor_setup):
    _, _, factors = factor_setup
    for n in factors.layer_names:
        for mat in (factors.A[n], factors.S[n]):
            assert np.allclose(mat, mat.T, atol=1e-12)
            assert np.linalg.eigvalsh(mat).min() >= -1e-10


def test_factors_reject_empty(trained_small):
    with pytest.raises(InputError):
        ek.estimate_factors(trained_small, [], "mlp")


def test_factors_reject_embedding(trained_small, small_corpus):
    with pytest.raises(InputError):
        ek.estimate_factors(trained_small, small_corpus[0][:4], ["embed"])


# --- basis fitting -----------------------------------------------------------------

def test_basis_eigenvectors_orthonormal(basis_setup):
    _, _, basis = basis_setup
    for n in basis.layer_names:
        for q in (basis.q_a[n], basis.q_s[n]):
            assert np.allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-8)


def test_lambda_nonnegative(basis_setup):
    _, _, basis = basis_setup
    for n in basis.layer_names:
        assert basis.lam[n].min() >= 0.0


def test_diagonal_factors_axis_aligned(factor_setup):
    ckpt, data, factors = factor_setup
    diag = ek.KroneckerFactors(
        factors.layer_names,
        {n: np.diag(np.diag(factors.A[n])) for n in factors.layer_names},
        {n: np.diag(np.diag(factors.S[n])) for n in factors.layer_names},
        factors.sample_count, factors.checkpoint_hash)
    basis = ek.fit_basis(diag, ckpt, data, damping=1e-6)
    for n in basis.layer_names:
        for q in (basis.q_a[n], basis.q_s[n]):
            # each eigenvector is +-(a standard basis vector)
            assert np.allclose(np.abs(q).max(axis=0), 1.0, atol=1e-10)
            assert np.allclose(np.abs(q).sum(axis=0), 1.0, atol=1e-10)


def test_default_damping_is_relative(basis_setup):
    _, _, basis = basis_setup
    mean_lam = np.mean(np.concatenate([basis.lam[n].ravel()
                                       for n in basis.layer_names]))
    assert basis.damping == pytest.approx(0.1 * mean_lam)


def test_basis_checkpoint_mismatch(factor_setup, tiny_checkpoint):
    _, data, factors = factor_setup
    with pytest.raises(InputError):
        ek.fit_basis(factors, tiny_checkpoint, data)


def test_top_eigenvalue_vs_exact_spectrum():
    """Near-linear one-block net: block-diagonal EK-FAC top eigenvalue agrees
    with the dense Gauss-Newton top eigenvalue to 20%."""
    data, _ = dg.generate_corpus(dg.TaskSpec(n_train=80, n_val=10, seed=6))
    cfg = md.ModelConfig(embed_dim=10, hidden_dim=8, mlp_layers=1, window=16, seed=4)
    ck = md.init_model(cfg)
    ck = md.train(ck, data, md.TrainConfig(epochs=8, peak_lr=0.15, batch_size=16,
                                           snapshot_every=8, seed=0))[-1]
    ck.params["mlp0.fc_in"] *= 0.3       # keep tanh in its linear regime
    factors = ek.estimate_factors(ck, data, "mlp")
    basis = ek.fit_basis(factors, ck, data, damping=1e-6)
    exact_top = np.linalg.eigvalsh(ek.assemble_fisher(ck, data, "mlp"))[-1]
    ek_top = max(basis.lam[n].max() for n in basis.layer_names)
    assert abs(ek_top - exact_top) <= 0.2 * exact_top


# --- ihvp ------------------------------------------------------------------------------

def hand_basis(lam_row, damping):
    """Single 1 x len(lam_row) layer with identity eigenvectors."""
    lam = np.asarray([lam_row], dtype=np.float64)
    return ek.EkfacBasis(["layer"], {"layer": np.eye(lam.shape[1])},
                         {"layer": np.eye(1)}, {"layer": lam},
                         damping, "nohash")


def test_ihvp_axis_aligned_division():
    basis = hand_basis([2.0, 4.0], damping=1e-15)
    out = ek.ihvp(basis, np.array([2.0, 4.0]))
    assert np.allclose(out, [1.0, 1.0], atol=1e-9)


def test_ihvp_damping_limit_shrinks_toward_g_over_lambda():
    basis = hand_basis([2.0, 4.0], damping=1e9)
    g = np.array([3.0, -5.0])
    out = ek.ihvp(basis, g)
    assert np.allclose(out, g / 1e9, rtol=1e-6)


def test_ihvp_linear(basis_setup):
    _, _, basis = basis_setup
    rng = np.random.default_rng(3)
    g1 = rng.normal(size=basis.param_count())
    g2 = rng.normal(size=basis.param_count())
    lhs = ek.ihvp(basis, 2.5 * g1 - 1.25 * g2)
    rhs = 2.5 * ek.ihvp(basis, g1) - 1.25 * ek.ihvp(basis, g2)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_ihvp_reconstruction_identity(basis_setup):
    _, _, basis = basis_setup
    rng = np.random.default_rng(4)
    g = rng.normal(size=basis.param_count())
    x = ek.ihvp(basis, g)
    resid = np.linalg.norm(ek.ekfac_matvec(basis, x) - g) / np.linalg.norm(g)
    assert resid < 1e-8


def test_ihvp_norm_decreases_with_damping(basis_setup):
    ckpt, _, basis = basis_setup
    rng = np.random.default_rng(5)
    g = rng.normal(size=basis.param_count())
    norms = []
    for lam in (basis.damping, 10 * basis.damping, 1000 * basis.damping):
        b = ek.EkfacBasis(basis.layer_names, basis.q_a, basis.q_s, basis.lam,
                          lam, basis.checkpoint_hash)
        norms.append(np.linalg.norm(ek.ihvp(b, g)))
    assert norms[0] > norms[1] > norms[2]


def test_ihvp_dimension_mismatch(basis_setup):
    _, _, basis = basis_setup
    with pytest.raises(InputError):
        ek.ihvp(basis, np.zeros(basis.param_count() + 1))


# --- exact oracle ------------------------------------------------------------------------

def test_damped_solve_quadratic_toy():
    H = np.diag([1.0, 2.0])
    assert np.allclose(ek.damped_solve(H, 0.0, np.array([1.0, 2.0])), [1.0, 1.0])
    assert np.allclose(ek.damped_solve(H, 1.0, np.array([1.0, 2.0])),
                       [0.5, 2.0 / 3.0])


def test_exact_oracle_refuses_large_models(small_corpus):
    cfg = md.ModelConfig(embed_dim=48, hidden_dim=96, mlp_layers=2, window=16, seed=0)
    ck = md.init_model(cfg)
    with pytest.raises(RefusalError):
        ek.assemble_fisher(ck, small_corpus[0][:2], "mlp")


def test_one_layer_single_position_kronecker_exact(trained_small, small_corpus):
    """With one example and one scored position, the layer Fisher is exactly
    Kronecker, so EK-FAC and the dense oracle agree to high precision."""
    train, _ = small_corpus
    src = train[0]
    one = dg.Example(0, src.prompt_tokens + src.completion_tokens[:-1],
                     [dg.END_ID],
                     [False] * (len(src.tokens) - 1) + [True], src.gold_answer)
    lf = ["mlp0.fc_in"]
    factors = ek.estimate_factors(trained_small, [one], lf)
    basis = ek.fit_basis(factors, trained_small, [one], damping=1e-3)
    H = ek.assemble_fisher(trained_small, [one], lf)
    rng = np.random.default_rng(6)
    g = rng.normal(size=basis.param_count())
    a = ek.ihvp(basis, g)
    b = ek.damped_solve(H, 1e-3, g)
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cos > 0.999


def test_basis_save_load_roundtrip(tmp_path, basis_setup):
    _, _, basis = basis_setup
    path = tmp_path / "basis.bin"
    ek.save_basis(path, basis)
    back = ek.load_basis(path)
    assert back.layer_names == basis.layer_names
    assert back.damping == basis.damping
    assert back.checkpoint_hash == basis.checkpoint_hash
    for n in basis.layer_names:
        assert np.array_equal(back.q_a[n], basis.q_a[n])
        assert np.array_equal(back.q_s[n], basis.q_s[n])
        assert np.array_equal(back.lam[n], basis.lam[n])
