import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

import oracles
from coherentcast.errors import ConfigurationError, NumericalError
from coherentcast.reconcile import (DIAG_FLOOR, Hierarchy, ReconcilerParams, ReconcilerTrainConfig, assemble_cone,
                                    coef_weight, dcl_backward, reconcile, reconcile_batch, reconciled_energy,
                                    train_reconciler)

TWO = Hierarchy.single_level(2)


def random_params(rng, size, spread=1.0):
    Q_r = np.tril(rng.normal(size=(size, size)) * 0.3 * spread)
    Q_r[np.diag_indices(size)] = rng.uniform(0.5, 2.0, size)
    return ReconcilerParams(Q_r)


def random_hierarchy(rng):
    n = int(rng.integers(2, 5))
    if rng.random() < 0.5:
        return Hierarchy.single_level(n)
    # two aggregates: the total and a partial group
    k = int(rng.integers(1, n))
    return Hierarchy(np.vstack([np.ones(n), np.r_[np.ones(k), np.zeros(n - k)]]))


def nnls_oracle(x_hat, params, hier):
    """Solve min |Q_r (B z - x_hat)|^2, z >= 0 with scipy's NNLS."""
    A = params.Q_r @ hier.B
    z, _ = nnls(A, params.Q_r @ x_hat, maxiter=1000)
    return hier.B @ z


# --- structure -------------------------------------------------------------


def test_hierarchy_validation():
    with pytest.raises(ConfigurationError):
        Hierarchy(np.array([[1.0, 0.5]]))
    with pytest.raises(ConfigurationError):
        Hierarchy(np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert TWO.size == 3 and TWO.n_agg == 1 and TWO.n_bottom == 2


def test_params_validation():
    with pytest.raises(ConfigurationError):
        ReconcilerParams(np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ConfigurationError):
        ReconcilerParams(np.ones((2, 3)))


def test_from_weight_round_trip():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    Q = A @ A.T + 4 * np.eye(4)
    p = ReconcilerParams.from_weight(Q)
    np.testing.assert_allclose(p.Q, Q, rtol=1e-12, atol=1e-12)
    assert np.all(np.diag(p.Q_r) > 0)


def test_diagonal_floor():
    p = ReconcilerParams(np.diag([1.0, -0.5, 0.0]))
    with pytest.raises(NumericalError):
        p.check()
    assert np.all(np.diag(p.floored().Q_r) >= DIAG_FLOOR)


# --- solver ----------------------------------------------------------------


def test_feasible_input_unchanged():
    rng = np.random.default_rng(1)
    for _ in range(10):
        sol = reconcile(np.array([2.0, 1.0, 1.0]), random_params(rng, 3), TWO)
        np.testing.assert_array_equal(sol.x, [2.0, 1.0, 1.0])


def test_projection_hand_value():
    sol = reconcile(np.array([3.0, 1.0, 1.0]), ReconcilerParams.identity(3), TWO)
    np.testing.assert_allclose(sol.x, [8 / 3, 4 / 3, 4 / 3], atol=1e-14)
    grid = oracles.qp_grid_two_bottoms([3.0, 1.0, 1.0], np.eye(3).tolist())
    np.testing.assert_allclose(sol.x, grid, atol=5e-3)


def test_bound_active_hand_value():
    sol = reconcile(np.array([0.0, -3.0, 1.0]), ReconcilerParams.identity(3), TWO)
    np.testing.assert_allclose(sol.x, [0.5, 0.0, 0.5], atol=1e-14)
    assert list(sol.active) == [1]
    grid = oracles.qp_grid_two_bottoms([0.0, -3.0, 1.0], np.eye(3).tolist())
    np.testing.assert_allclose(sol.x, grid, atol=5e-3)


def test_weighted_hand_value_against_grid():
    Q_r = np.array([[1.0, 0, 0], [0.3, 2.0, 0], [-0.2, 0.1, 0.7]])
    x_hat = np.array([4.0, 0.5, 2.5])
    sol = reconcile(x_hat, ReconcilerParams(Q_r), TWO)
    grid = oracles.qp_grid_two_bottoms(x_hat.tolist(), (Q_r.T @ Q_r).tolist())
    np.testing.assert_allclose(sol.x, grid, atol=5e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_matches_nnls(seed):
    rng = np.random.default_rng(seed)
    hier = random_hierarchy(rng)
    params = random_params(rng, hier.size)
    X_hat = rng.normal(size=(20, hier.size)) * 3
    X, _ = reconcile_batch(X_hat, params, hier)
    for x, x_hat in zip(X, X_hat):
        ref = nnls_oracle(x_hat, params, hier)
        obj = lambda v: float(np.sum((params.Q_r @ (v - x_hat)) ** 2))  # noqa: E731
        assert obj(x) <= obj(ref) + 1e-9 * max(1.0, obj(ref))
        np.testing.assert_allclose(x, ref, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_output_coherent_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    hier = random_hierarchy(rng)
    X, _ = reconcile_batch(rng.normal(size=(50, hier.size)) * 10, random_params(rng, hier.size), hier)
    assert hier.coherency_gap(X).max() <= 1e-8
    assert X.min() >= -1e-10


def test_multipliers_satisfy_kkt():
    rng = np.random.default_rng(7)
    params = random_params(rng, 4)
    hier = Hierarchy.single_level(3)
    X_hat = rng.normal(size=(200, 4)) * 2
    X, W, lam, mu = reconcile_batch(X_hat, params, hier, return_multipliers=True)
    grad = 2 * (X - X_hat) @ params.Q
    # stationarity: grad + C^T lam - [0; mu] = 0
    resid = grad + lam @ hier.C
    resid[:, hier.n_agg:] -= mu
    assert np.abs(resid).max() <= 1e-9
    assert mu.min() >= -1e-12
    assert np.abs(mu * X[:, hier.n_agg:]).max() <= 1e-12


# --- cone form -------------------------------------------------------------


def test_cone_shapes():
    A, b, c, K = assemble_cone(np.array([3.0, 1.0, 1.0]), ReconcilerParams.identity(3), TWO)
    assert A.shape[1] == 7
    np.testing.assert_array_equal(c, np.eye(7)[0])
    assert sum(K.dims) == A.shape[0] == len(b)


def test_cone_affine_in_x_hat():
    rng = np.random.default_rng(2)
    params = random_params(rng, 3)
    x_hat = rng.normal(size=3)
    A1, b1, c1, _ = assemble_cone(x_hat, params, TWO)
    A2, b2, c2, _ = assemble_cone(2 * x_hat, params, TWO)
    np.testing.assert_array_equal(A1, A2)
    np.testing.assert_array_equal(c1, c2)
    changed = np.flatnonzero(b1 != b2)
    np.testing.assert_array_equal(b2[changed], 2 * b1[changed])
    np.testing.assert_array_equal(np.sort(-b1[changed]), np.sort(x_hat[x_hat != 0]))


def test_solution_feasible_for_cone():
    rng = np.random.default_rng(3)
    for _ in range(50):
        params = random_params(rng, 3)
        x_hat = rng.normal(size=3) * 3
        sol = reconcile(x_hat, params, TWO)
        A, b, c, K = assemble_cone(x_hat, params, TWO)
        eta = np.linalg.norm(params.Q_r @ (x_hat - sol.x))
        v = np.concatenate([[eta], x_hat, sol.x])
        assert K.violation(b - A @ v) <= 1e-7
        assert c @ v == pytest.approx(np.sqrt(sol.objective))


# --- differentiation -------------------------------------------------------


def _loss_and_grads(x_hat, params, hier, w):
    sol = reconcile(x_hat, params, hier)
    return float(w @ sol.x), dcl_backward(sol, w)


def test_zero_upstream():
    sol = reconcile(np.array([3.0, -1.0, 2.0]), random_params(np.random.default_rng(4), 3), TWO)
    dQ, dx = dcl_backward(sol, np.zeros(3))
    assert not dQ.any() and not dx.any()


def test_projector_gradient():
    w = np.array([0.3, -1.2, 0.8])
    sol = reconcile(np.array([3.0, 1.0, 1.5]), ReconcilerParams.identity(3), TWO)
    assert len(sol.active) == 0
    B = TWO.B
    P = B @ np.linalg.solve(B.T @ B, B.T)
    _, dx = dcl_backward(sol, w)
    np.testing.assert_allclose(dx, P.T @ w, atol=1e-13)


@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    hier = Hierarchy.single_level(3)
    params = random_params(rng, 4)
    x_hat = rng.normal(size=4) * 2
    x_hat[2] = -3.0  # one bound likely active
    w = rng.normal(size=4)
    _, (dQ, dx) = _loss_and_grads(x_hat, params, hier, w)
    eps = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = eps
        fd = (_loss_and_grads(x_hat + e, params, hier, w)[0] - _loss_and_grads(x_hat - e, params, hier, w)[0]) / (2 * eps)
        assert dx[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)
    for i, j in zip(*np.tril_indices(4)):
        E = np.zeros((4, 4))
        E[i, j] = eps
        fp = _loss_and_grads(x_hat, ReconcilerParams(params.Q_r + E), hier, w)[0]
        fm = _loss_and_grads(x_hat, ReconcilerParams(params.Q_r - E), hier, w)[0]
        assert dQ[i, j] == pytest.approx((fp - fm) / (2 * eps), rel=1e-4, abs=1e-7)
    assert not np.triu(dQ, 1).any()


# --- weights and training ----------------------------------------------------


def test_coef_weight_is_inverse_correlation():
    rng = np.random.default_rng(5)
    errors = rng.normal(size=(500, 3)) @ np.array([[1, 0.5, 0], [0, 1, 0.3], [0, 0, 1]])
    Q = coef_weight(errors, ridge=0.0)
    np.testing.assert_allclose(Q @ np.corrcoef(errors, rowvar=False), np.eye(3), atol=1e-10)
    np.testing.assert_array_equal(Q, Q.T)


def _noisy_pair(rng, origins, m=32, tau=2):
    """Total and bottom 2 are accurate; bottom 1 has ten times the noise."""
    z = rng.uniform(5, 10, size=(origins, 2, tau))
    actual = np.concatenate([z.sum(1, keepdims=True), z], axis=1)
    sigma = np.array([0.3, 3.0, 0.3])[None, None, :, None]
    bias = rng.normal(size=(origins, 1, 3, 1)) * sigma
    return actual[:, None] + bias + rng.normal(size=(origins, m, 3, tau)) * sigma, actual


def test_training_starts_at_identity_and_improves():
    rng = np.random.default_rng(6)
    ts, ta = _noisy_pair(rng, 24)
    vs, va = _noisy_pair(rng, 8)
    cfg = ReconcilerTrainConfig(epochs=12, batch_origins=8, lr=0.03)
    params, hist = train_reconciler(ts, ta, vs, va, TWO, cfg)
    assert hist[0]["val"] == pytest.approx(reconciled_energy(vs, va, ReconcilerParams.identity(3), TWO))
    assert reconciled_energy(vs, va, params, TWO) <= hist[0]["val"]
    # the noisy bottom series ends up with the smaller weight
    Q = params.Q
    assert Q[1, 1] / Q[2, 2] < 1.0
