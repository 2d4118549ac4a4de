import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.stats import ortho_group

from attnfactor.attention import apply_attention, target_pca_attention
from attnfactor.linear import (
    AlignmentError, DegenerateRankError, FactorFit, LinearAutoencoderFit, align_rotation,
    autoencoder_loss, autoencoder_pca_subspace_distance, common_component, factor_mse,
    fit_attention_pca, fit_linear_autoencoder, loading_mse, svd_fit,
)


def brute_force_common(z, k):
    """Independent route: numpy's general eigensolver on Z'Z, then project."""
    w, V = np.linalg.eig(z.T @ z)
    order = np.argsort(-w.real)
    Q = V[:, order[:k]].real
    Q, _ = np.linalg.qr(Q)
    return z @ Q @ Q.T


def test_rank_one_exact():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(20, 1))
    lam = rng.normal(size=(8, 1))
    lam *= np.sqrt(8) / np.linalg.norm(lam)
    z = f @ lam.T
    fit = fit_attention_pca(z, 1)
    assert_allclose(common_component(fit), z, atol=1e-10)


def test_small_random_vs_brute_force():
    z = np.random.default_rng(1).normal(size=(4, 3))
    for k in (1, 2):
        assert_allclose(common_component(fit_attention_pca(z, k)), brute_force_common(z, k), atol=1e-10)


def test_target_pca_gamma_one_is_pooled_pca():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(30, 5)), rng.normal(size=(30, 3))
    z = apply_attention(np.eye(30), X, Y, target_pca_attention(5, 3, 1.0))
    a, b = fit_attention_pca(z, 2), fit_attention_pca(np.hstack([X, Y]), 2)
    assert_allclose(a.loadings, b.loadings, atol=1e-12)


def test_svd_examples():
    fit = svd_fit(np.diag([3.0, 2.0, 1.0]), 2)
    assert_allclose(fit.singular_values, [3, 2])
    z = np.random.default_rng(3).normal(size=(6, 4))
    assert_allclose(common_component(svd_fit(z, 4)), z, atol=1e-12)
    assert_allclose(common_component(fit_attention_pca(z, 4)), z, atol=1e-12)


def test_k_zero_and_errors():
    z = np.random.default_rng(4).normal(size=(5, 3))
    assert np.all(common_component(fit_attention_pca(z, 0)) == 0)
    with pytest.raises(ValueError):
        fit_attention_pca(z, 4)
    low = np.outer(np.arange(1.0, 6.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateRankError):
        fit_attention_pca(low, 2)
    with pytest.raises(DegenerateRankError):
        svd_fit(low, 2)


def test_subspace_only_flag_on_ties():
    with pytest.warns(UserWarning):
        fit = fit_attention_pca(np.eye(4), 2)
    assert fit.subspace_only


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2 ** 31), st.booleans())
def test_fit_invariants(T, N, seed, demean):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(T, N)) @ np.diag(np.linspace(1, 3, N))
    k = min(T, N) - 1 if demean else min(T, N)
    k = max(1, min(k, 3))
    a, b = fit_attention_pca(z, k, demean), svd_fit(z, k, demean)
    for fit in (a, b):
        assert_allclose(fit.loadings.T @ fit.loadings / N, np.eye(k), atol=1e-10)
        assert np.all(np.diff(fit.eigenvalues) <= 1e-12)
        assert_allclose(fit.eigenvalues, fit.singular_values ** 2 / N, rtol=1e-10, atol=1e-12)
        zc = z - fit.column_mean if demean else z
        assert_allclose(fit.loadings.T @ fit.loadings @ fit.factors.T, fit.loadings.T @ zc.T,
                        atol=1e-9 * max(1, np.abs(zc).max()))
    assert_allclose(common_component(a), common_component(b), atol=1e-9)
    assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-10, atol=1e-12)


def test_sign_convention_and_wide_panel():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(10, 40))
    a, b = fit_attention_pca(z, 3), svd_fit(z, 3)
    assert_allclose(a.loadings, b.loadings, atol=1e-9)
    idx = np.argmax(np.abs(a.loadings), axis=0)
    assert np.all(a.loadings[idx, range(3)] > 0)


def test_factor_fit_round_trip(tmp_path):
    fit = svd_fit(np.random.default_rng(6).normal(size=(9, 5)), 2, demean=True)
    fit.save(tmp_path / "fit")
    back = FactorFit.load(tmp_path / "fit")
    assert_allclose(back.loadings, fit.loadings, rtol=0, atol=0)
    assert_allclose(back.column_mean, fit.column_mean, rtol=0, atol=0)


def test_align_rotation_examples():
    rng = np.random.default_rng(7)
    truth = rng.normal(size=(30, 3))
    h = align_rotation(truth, truth)
    assert_allclose(h.H, np.eye(3), atol=1e-12) and h.residual < 1e-12
    h = align_rotation(-truth[:, :1], truth[:, :1])
    assert_allclose(h.H, [[-1.0]]) and h.residual < 1e-12
    Q = ortho_group.rvs(3, random_state=8)
    h = align_rotation(truth @ Q.T, truth)
    assert_allclose(h.H, Q, atol=1e-10)
    assert_allclose(h.H.T @ h.H, np.eye(3), atol=1e-10)
    with pytest.raises(AlignmentError):
        align_rotation(np.zeros((30, 3)), truth)


def test_invertible_alignment():
    rng = np.random.default_rng(9)
    truth = rng.normal(size=(25, 2))
    G = np.array([[2.0, 0.5], [0.0, -1.0]])
    h = align_rotation(truth @ G.T, truth, method="invertible")
    assert_allclose(h.H, G, atol=1e-10)


def test_mse_hand_cases():
    truth = np.array([[0.5], [0.0]])
    est = np.array([[1.0], [0.0]])
    h = align_rotation(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]))
    assert loading_mse(est, truth, h) == pytest.approx(0.125, abs=1e-15)
    assert factor_mse(est, truth, h) == pytest.approx(0.125, abs=1e-15)
    t = np.random.default_rng(10).normal(size=(6, 2))
    for fn in (loading_mse, factor_mse):
        assert fn(t, t, align_rotation(t, t)) < 1e-24
        assert fn(-t, t, align_rotation(-t, t)) < 1e-24


def test_factor_mse_uses_inverse_transpose():
    rng = np.random.default_rng(11)
    lam, F = rng.normal(size=(40, 2)), rng.normal(size=(50, 2))
    Q = ortho_group.rvs(2, random_state=12)
    h = align_rotation(lam @ Q.T, lam)
    # F Lambda' = (F Q^{-1}) (Lambda Q')' so estimated factors are F Q^{-1}
    assert factor_mse(F @ np.linalg.inv(Q), F, h) < 1e-24


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_loading_mse_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(20, 3))
    est = truth + 0.3 * rng.normal(size=(20, 3))
    base = loading_mse(est, truth, align_rotation(est, truth))
    Q = ortho_group.rvs(3, random_state=seed % 2 ** 31)
    rot = est @ Q.T
    assert_allclose(loading_mse(rot, truth, align_rotation(rot, truth)), base, atol=1e-10)


def test_autoencoder_closed_form():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(30, 2)) @ rng.normal(size=(2, 7)) + rng.normal(size=7)
    ae = fit_linear_autoencoder(z, 3)
    assert ae.final_loss < 1e-10
    zc = rng.normal(size=(40, 6))
    zc -= zc.mean(axis=0)
    ae = fit_linear_autoencoder(zc, 2)
    assert_allclose(ae.b0, 0) and np.abs(ae.b1).max() < 1e-14
    pca = fit_attention_pca(zc, 2)
    assert autoencoder_pca_subspace_distance(ae, pca) < 1e-12


def test_autoencoder_any_nonsingular_r():
    rng = np.random.default_rng(14)
    z = rng.normal(size=(40, 8))
    z -= z.mean(axis=0)
    ae = fit_linear_autoencoder(z, 3)
    R = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    l0 = autoencoder_loss(z, ae.W0, ae.W1, ae.b0, ae.b1)
    l1 = autoencoder_loss(z, np.linalg.solve(R, ae.W0), ae.W1 @ R, ae.b0, ae.b1)
    assert_allclose(l1, l0, rtol=1e-10)
    rotated = LinearAutoencoderFit(ae.W0, fit_attention_pca(z, 3).loadings @ R, ae.b0, ae.b1, l0)
    assert autoencoder_pca_subspace_distance(rotated, fit_attention_pca(z, 3)) < 1e-10


def test_autoencoder_gradient_matches_closed_form():
    z = np.random.default_rng(15).normal(size=(50, 10))
    cf = fit_linear_autoencoder(z, 3)
    gd = fit_linear_autoencoder(z, 3, "gradient", seed=1, tol=1e-13, max_iter=400_000)
    assert abs(gd.final_loss - cf.final_loss) <= 1e-4 * cf.final_loss
    assert np.all(np.diff(gd.loss_history) <= 1e-9 * gd.loss_history[0])
    dist = autoencoder_pca_subspace_distance(gd, fit_attention_pca(z, 3, demean=True))
    assert dist < 1e-2


def test_autoencoder_divergence_detected():
    z = np.random.default_rng(16).normal(size=(20, 5))
    from attnfactor.linear import TrainingFailure
    with pytest.raises(TrainingFailure):
        fit_linear_autoencoder(z, 2, "gradient", lr=50.0, max_iter=1000)


def test_subspace_distance_degenerate():
    z = np.random.default_rng(17).normal(size=(20, 5))
    bad = LinearAutoencoderFit(np.zeros((2, 5)), np.zeros((5, 2)), np.zeros(2), np.zeros(5), 0.0)
    with pytest.raises(DegenerateRankError):
        autoencoder_pca_subspace_distance(bad, fit_attention_pca(z, 2))
