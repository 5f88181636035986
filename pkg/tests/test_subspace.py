import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfaa import ndmath as nd
from cfaa import subspace

from conftest import random_spd


def projected_gradient_oracle(Z, Xi, nu, steps=10_000):
    """min 1/2 ||Z - Z B||^2 + nu Tr(B^T Phi B) over zero-diagonal B, Phi fixed."""
    G = Z.T @ Z
    H = G + nu * Xi
    lr = 1.0 / np.linalg.eigvalsh(H).max()
    B = np.zeros_like(G)
    for _ in range(steps):
        B = B - lr * (H @ B - G)
        np.fill_diagonal(B, 0.0)
    return B


def correlated(rng, n, d):
    return rng.normal(size=(n, d)) @ rng.normal(size=(d, d))


# --------------------------------------------------------------------------
# self-expression


def test_orthogonal_columns_give_zero_coefficients(rng):
    Q = np.linalg.qr(rng.normal(size=(20, 4)))[0] * [1.0, 2.0, 3.0, 0.5]
    sol = subspace.solve_self_expression(Q)
    assert np.abs(sol.B).max() < 1e-12


def test_identical_columns_first_iteration_hand_inverse(rng):
    z = rng.normal(size=12)
    Z = np.stack([z, z], axis=1)
    nu = 0.1
    s = float(z @ z)
    sol = subspace.solve_self_expression(Z, nu=nu, max_iter=1)
    # Theta = [[s + 2nu, s], [s, s + 2nu]]^-1, so -Theta_01 / Theta_11 = s / (s + 2nu)
    det = (s + 2 * nu) ** 2 - s**2
    theta = np.array([[s + 2 * nu, -s], [-s, s + 2 * nu]]) / det
    assert np.allclose(sol.Theta, theta, rtol=1e-10)
    expected = s / (s + 2 * nu)
    assert sol.B[0, 1] == pytest.approx(expected, rel=1e-10)
    assert sol.B[1, 0] == pytest.approx(expected, rel=1e-10)
    assert expected > 0


@given(n=st.integers(4, 40), d=st.integers(2, 8), seed=st.integers(0, 2**31 - 1))
def test_solution_invariants(n, d, seed):
    Z = correlated(np.random.default_rng(seed), n, d)
    sol = subspace.solve_self_expression(Z)
    assert np.all(np.diag(sol.B) == 0.0)
    assert np.abs(sol.Theta - sol.Theta.T).max() <= 1e-8 * max(1.0, np.abs(sol.Theta).max())
    assert np.allclose(sol.Phi, sol.Phi.T)
    assert np.linalg.eigvalsh(sol.Phi).min() > 0
    assert np.allclose(sol.Xi, sol.Phi + sol.Phi.T)


def test_stationarity_residual(rng):
    for _ in range(10):
        sol = subspace.solve_self_expression(correlated(rng, 32, 5))
        assert sol.converged
        assert sol.stationarity_residual() <= 1e-6


def test_projected_gradient_oracle_agreement(rng):
    Z = correlated(rng, 32, 4)
    sol = subspace.solve_self_expression(Z)
    oracle = projected_gradient_oracle(Z, sol.Xi, sol.nu)
    assert np.abs(sol.B - oracle).max() <= 1e-4


def test_column_ratio_rule_matches_when_phi_is_diagonal(rng):
    Z = correlated(rng, 25, 4)
    kkt = subspace.solve_self_expression(Z, max_iter=1)
    ratio = subspace.solve_self_expression(Z, max_iter=1, rule="ratio")
    assert np.allclose(kkt.B, ratio.B, atol=1e-12)


def test_column_ratio_rule_is_not_stationary_for_general_phi(rng):
    # documents why the exact zero-diagonal solve is the default
    Z = correlated(rng, 25, 4)
    ratio = subspace.solve_self_expression(Z, rule="ratio")
    assert ratio.stationarity_residual() > 1e-3


def test_invalid_arguments(rng):
    with pytest.raises(ValueError):
        subspace.solve_self_expression(rng.normal(size=(5, 3)), nu=0.0)
    with pytest.raises(ValueError):
        subspace.solve_self_expression(rng.normal(size=(1, 3)))
    with pytest.raises(ValueError):
        subspace.solve_self_expression(rng.normal(size=(5, 1)))


def test_singular_system_retries_with_jitter():
    out = subspace._inverse(np.ones((2, 2)))
    assert np.isfinite(out).all()


# --------------------------------------------------------------------------
# attribution graph


def test_empty_graph():
    g = subspace.build_attribution_graph(np.zeros((3, 3)))
    for m in (g.A, g.Deg, g.L, g.L_pinv):
        assert np.array_equal(m, np.zeros((3, 3)))


def test_graph_from_asymmetric_coefficients():
    g = subspace.build_attribution_graph([[0.0, -1.0], [0.5, 0.0]])
    assert np.allclose(g.A, [[0, 0.75], [0.75, 0]])
    assert np.allclose(g.Deg, np.diag([0.75, 0.75]))
    assert np.allclose(g.L, [[0.75, -0.75], [-0.75, 0.75]])


@given(d=st.integers(2, 10), seed=st.integers(0, 2**31 - 1))
def test_laplacian_properties(d, seed):
    B = np.random.default_rng(seed).normal(size=(d, d))
    np.fill_diagonal(B, 0.0)
    g = subspace.build_attribution_graph(B)
    assert np.allclose(g.A, g.A.T) and (g.A >= 0).all() and np.all(np.diag(g.A) == 0)
    assert np.abs(g.L.sum(axis=1)).max() <= 1e-8
    assert np.linalg.eigvalsh(g.L).min() >= -1e-10
    assert np.abs(g.L @ g.L_pinv @ g.L - g.L).max() <= 1e-6


# --------------------------------------------------------------------------
# Bures-Wasserstein


def test_bures_identical_is_zero(rng):
    S = random_spd(rng, 4)
    assert subspace.bures_distance(S, S) <= 1e-8


def test_bures_diagonal_closed_form():
    d = subspace.bures_distance(np.diag([1.0, 4.0]), np.diag([4.0, 1.0]))
    assert d == pytest.approx(2.0, abs=1e-8)


@given(d=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_bures_symmetry_and_nonnegativity(d, seed):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(d, d)), r.normal(size=(d, d))
    S, T = A @ A.T, B @ B.T
    ab, ba = subspace.bures_distance(S, T), subspace.bures_distance(T, S)
    assert ab >= 0.0
    assert abs(ab - ba) <= 1e-6 * max(1.0, ab)


def test_bures_zero_only_for_equal_inputs(rng):
    S = random_spd(rng, 3)
    assert subspace.bures_distance(S, S + 1e-3 * np.eye(3)) > 0


def test_bures_rejects_indefinite():
    with pytest.raises(nd.DomainError):
        subspace.bures_distance(np.diag([1.0, -1.0]), np.eye(2))


def test_bures_node_matches_function_and_gradient(rng):
    S = nd.param(random_spd(rng, 3))
    T = nd.param(random_spd(rng, 3))
    root = subspace.bures_node(S, T)
    assert root.item() == pytest.approx(subspace.bures_distance(S.value, T.value), rel=1e-10)
    assert nd.grad_check(root, [S, T]) <= 1e-4


# --------------------------------------------------------------------------
# L_A


def test_horizontal_loss_identical_domains(rng):
    U, V = correlated(rng, 16, 4), correlated(rng, 16, 4)
    assert subspace.horizontal_loss(U, U, V, V).item() < 1e-6


def test_wasserstein_sum_composed_fixture(rng):
    user = nd.constant(random_spd(rng, 2))
    L = subspace.wasserstein_sum([(user, user),
                                  (nd.constant(np.diag([1.0, 4.0])), nd.constant(np.diag([4.0, 1.0])))])
    assert L.item() == pytest.approx(2.0, abs=1e-8)


def test_horizontal_loss_row_permutation_invariance(rng):
    Zs = [correlated(rng, 16, 4) for _ in range(4)]
    base = subspace.horizontal_loss(*Zs).item()
    permuted = [z[rng.permutation(16)] for z in Zs]
    assert abs(subspace.horizontal_loss(*permuted).item() - base) <= 1e-10


def test_horizontal_loss_width_mismatch(rng):
    with pytest.raises(nd.ShapeError):
        subspace.horizontal_loss(correlated(rng, 8, 4), correlated(rng, 8, 4),
                                 correlated(rng, 8, 3), correlated(rng, 8, 3))


def test_horizontal_loss_full_chain_gradient(rng):
    Zs = [nd.param(correlated(rng, 16, 4)) for _ in range(4)]
    root = subspace.horizontal_loss(*Zs)
    assert root.item() > 0
    assert nd.grad_check(root, Zs) <= 1e-4
