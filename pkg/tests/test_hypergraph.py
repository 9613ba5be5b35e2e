import math

import numpy as np
import pytest

from hypersde import hypergraph as hg
from hypersde.autodiff import Tape, constant

from conftest import finite_difference, rel_err


def brute_force_propagation(H, m):
    """Entry-by-entry evaluation of the normalized operator, loops only."""
    n, e = H.shape
    d = [sum(m[j] * H[i][j] for j in range(e)) for i in range(n)]
    delta = [sum(H[i][j] for i in range(n)) for j in range(e)]
    S = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            acc = 0.0
            for j in range(e):
                acc += H[a][j] * m[j] * H[b][j] / delta[j]
            S[a, b] = acc / math.sqrt(d[a] * d[b])
    return S


def random_hypergraph(rng, n):
    X = rng.normal(size=(n, rng.integers(2, 5)))
    k = int(rng.integers(1, n))
    H = hg.build_incidence(X, k)
    m = rng.uniform(0.2, 2.0, size=n)
    return H, m


def test_center_weight_is_one():
    X = np.arange(12.0).reshape(4, 3)
    H = hg.build_incidence(X, 2)
    np.testing.assert_array_equal(np.diag(H), np.ones(4))


def test_line_example_hand_checked():
    X = np.array([[0.0], [1.0], [2.0], [10.0]])
    H = hg.build_incidence(X, 2, scale=1.0)
    mean0 = (1 + 2 + 10) / 3
    assert abs(H[1, 0] - math.exp(-1.0 / mean0**2)) < 1e-15
    assert abs(H[1, 0] - 0.9481) < 1e-4
    assert abs(H[2, 0] - math.exp(-4.0 / mean0**2)) < 1e-15
    assert H[3, 0] == 0.0  # node 3 is not among the two nearest of node 0
    assert H[0, 0] == 1.0


def test_column_sparsity_matches_self_inclusion_setting():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(9, 4))
    H = hg.build_incidence(X, 3)
    assert all(np.count_nonzero(H[:, j]) == 4 for j in range(9))
    H2 = hg.build_incidence(X, 3, self_in_k=True)
    assert all(np.count_nonzero(H2[:, j]) == 3 for j in range(9))
    np.testing.assert_array_equal(np.diag(H2), np.ones(9))


def test_k_too_large_is_parameter_error():
    X = np.random.default_rng(1).normal(size=(4, 2))
    with pytest.raises(ValueError, match="neighbors"):
        hg.build_incidence(X, 4)


def test_identical_rows_degenerate_geometry():
    with pytest.raises(ValueError, match="degenerate"):
        hg.build_incidence(np.ones((4, 2)), 2)


def test_single_node_propagation_is_identity():
    S = hg.build_propagation(np.array([[1.0]]), np.array([1.0]))
    np.testing.assert_array_equal(S, [[1.0]])


def test_propagation_matches_brute_force_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        H, m = random_hypergraph(rng, int(rng.integers(3, 10)))
        S = hg.build_propagation(H, m)
        assert np.max(np.abs(S - brute_force_propagation(H, m))) < 1e-12


def test_sqrt_degree_is_unit_eigenvector():
    rng = np.random.default_rng(3)
    for _ in range(25):
        H, m = random_hypergraph(rng, 8)
        S = hg.build_propagation(H, m)
        root_d = np.sqrt(hg.node_degrees(H, m))
        assert np.max(np.abs(S @ root_d - root_d)) < 1e-9


def test_propagation_symmetric_and_psd_with_unit_spectral_bound():
    rng = np.random.default_rng(4)
    for _ in range(25):
        H, _ = random_hypergraph(rng, int(rng.integers(3, 12)))
        S = hg.build_propagation(H, np.ones(H.shape[1]))
        assert np.max(np.abs(S - S.T)) < 1e-10
        eig = np.linalg.eigvalsh(S)
        assert eig.min() >= -1e-8
        assert eig.max() <= 1.0 + 1e-8


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    for _ in range(10):
        X = rng.normal(size=(8, 3))
        perm = rng.permutation(8)
        S = hg.build_propagation(hg.build_incidence(X, 3), np.ones(8))
        S_p = hg.build_propagation(hg.build_incidence(X[perm], 3), np.ones(8))
        np.testing.assert_allclose(S_p, S[np.ix_(perm, perm)], atol=1e-12)


def test_isolated_node_error():
    H = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="degree"):
        hg.build_propagation(H, np.ones(2))


def test_sparse_identity_when_probabilities_are_one():
    rng = np.random.default_rng(6)
    for _ in range(10):
        H, _ = random_hypergraph(rng, 7)
        dense = hg.build_propagation(H, np.ones(7))
        sparse = hg.build_sparse_propagation(H, constant(np.ones(7)))
        assert np.max(np.abs(sparse.data - dense)) < 1e-13


def test_sparse_invariant_under_uniform_scaling():
    rng = np.random.default_rng(7)
    for _ in range(10):
        H, _ = random_hypergraph(rng, 6)
        p = rng.uniform(0.1, 0.9, size=6)
        a = hg.build_sparse_propagation(H, constant(p)).data
        b = hg.build_sparse_propagation(H, constant(0.5 * p)).data
        assert np.max(np.abs(a - b)) < 1e-10


def test_sparse_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    H, _ = random_hypergraph(rng, 6)
    p0 = rng.uniform(0.2, 0.8, size=6)

    def loss_np(p):
        delta = H.sum(axis=0)
        d = H @ p
        dv = 1.0 / np.sqrt(d)
        S = dv[:, None] * (H @ np.diag(p / delta) @ H.T) * dv[None, :]
        return float(S.sum())

    tape = Tape()
    p = tape.leaf(p0)
    tape.backward(hg.build_sparse_propagation(H, p).sum())
    numeric = finite_difference(loss_np, [p0])[0]
    assert rel_err(p.grad, numeric) < 1e-4


def test_sparse_rejects_nonpositive_probability():
    H = hg.build_incidence(np.random.default_rng(9).normal(size=(5, 2)), 2)
    bad = np.array([0.5, 0.0, 0.5, 0.5, 0.5])
    with pytest.raises(ValueError, match="positive"):
        hg.build_sparse_propagation(H, constant(bad))


def test_knn_ties_break_toward_lowest_index():
    # nodes 1 and 2 are equidistant from node 0; k=1 must pick node 1
    X = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]])
    H = hg.build_incidence(X, 1)
    assert H[1, 0] > 0 and H[2, 0] == 0.0
