import numpy as np
import pytest
from hypothesis import given, strategies as st

from flockgnn.checks import random_adjacency, random_sequence
from flockgnn.gsp import (GraphHistory, InvalidInputError, apply_delayed_filter, apply_filter,
                          build_disk_graph, check_permutation, delayed_reach,
                          inverse_permutation, khop_mask, message_passing_filter, permute,
                          permutation_matrix, run_distributed_delayed_filter, shift)

PATH3 = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
seeds = st.integers(0, 2**32 - 1)


# build_disk_graph

def test_disk_graph_single_pair():
    S = build_disk_graph([[0, 0], [1, 0]], 2.0)
    np.testing.assert_array_equal(S, [[0, 1], [1, 0]])


def test_disk_graph_far_pair():
    np.testing.assert_array_equal(build_disk_graph([[0, 0], [5, 0]], 2.0), np.zeros((2, 2)))


def test_disk_graph_path():
    S = build_disk_graph([[0, 0], [1, 0], [2.5, 0]], 2.0)
    np.testing.assert_array_equal(S, PATH3)


def test_disk_graph_boundary_inclusive():
    assert build_disk_graph([[0, 0], [2, 0]], 2.0)[0, 1] == 1


@given(seeds)
def test_disk_graph_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-3, 3, size=(12, 2))
    S = build_disk_graph(pos, 1.7)
    for i in range(12):
        for j in range(12):
            want = i != j and np.linalg.norm(pos[i] - pos[j]) <= 1.7
            assert S[i, j] == want
    np.testing.assert_array_equal(S, S.T)


def test_disk_graph_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        build_disk_graph([[0, np.nan], [1, 0]], 2.0)
    with pytest.raises(InvalidInputError):
        build_disk_graph([[0, 0], [1, 0]], 0.0)


# shift

def test_shift_swap():
    np.testing.assert_array_equal(shift([[0, 1], [1, 0]], [[1], [0]]), [[0], [1]])


def test_shift_zero_signal(rng):
    S = random_adjacency(rng, 7)
    np.testing.assert_array_equal(shift(S, np.zeros((7, 3))), np.zeros((7, 3)))


def test_shift_path():
    np.testing.assert_array_equal(shift(PATH3, [[1], [0], [0]]), [[0], [1], [0]])


def test_shift_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        shift(PATH3, np.zeros((2, 1)))


# apply_filter

def test_filter_identity_tap(rng):
    X = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(apply_filter(random_adjacency(rng, 5), X, np.eye(3)[None]), X)


def test_filter_zero_signal(rng):
    H = rng.normal(size=(4, 2, 3))
    np.testing.assert_array_equal(apply_filter(random_adjacency(rng, 6), np.zeros((6, 2)), H),
                                  np.zeros((6, 3)))


def test_filter_path_expansion():
    H = np.ones((2, 1, 1))
    np.testing.assert_array_equal(apply_filter(PATH3, [[1], [0], [0]], H), [[1], [1], [0]])


def test_filter_against_matrix_powers(rng):
    S, X, H = random_adjacency(rng, 9), rng.normal(size=(9, 3)), rng.normal(size=(4, 3, 2))
    want = sum(np.linalg.matrix_power(S, k) @ X @ H[k] for k in range(4))
    np.testing.assert_allclose(apply_filter(S, X, H), want, atol=1e-10)


def test_filter_shape_mismatch(rng):
    with pytest.raises(InvalidInputError):
        apply_filter(PATH3, np.zeros((3, 2)), np.zeros((2, 3, 1)))
    with pytest.raises(InvalidInputError):
        apply_filter(PATH3, np.zeros((3, 2)), np.zeros((3, 1)))


@given(seeds, st.integers(2, 30), st.integers(0, 4))
def test_filter_permutation_equivariance(seed, N, K):
    rng = np.random.default_rng(seed)
    S, X, H = random_adjacency(rng, N), rng.normal(size=(N, 3)), rng.normal(size=(K + 1, 3, 2))
    perm = rng.permutation(N)
    Xp, Sp = permute(perm, X, S)
    np.testing.assert_allclose(apply_filter(Sp, Xp, H), apply_filter(S, X, H)[perm],
                               rtol=0, atol=1e-10)


@given(seeds, st.integers(2, 15), st.integers(0, 4))
def test_filter_locality(seed, N, K):
    rng = np.random.default_rng(seed)
    S, X, H = random_adjacency(rng, N, p=0.2), rng.normal(size=(N, 2)), rng.normal(size=(K + 1, 2, 2))
    full = apply_filter(S, X, H)
    for i in range(N):
        keep = sorted(khop_mask(S, i, K))
        Xm = np.zeros_like(X)
        Xm[keep] = X[keep]
        # rows outside the neighbourhood contribute exact zeros
        assert np.array_equal(apply_filter(S, Xm, H)[i], full[i]) or np.allclose(
            apply_filter(S, Xm, H)[i], full[i], rtol=0, atol=0)


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_filter_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    S, H = random_adjacency(rng, 8), rng.normal(size=(3, 2, 2))
    X1, X2 = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    np.testing.assert_allclose(apply_filter(S, a * X1 + b * X2, H),
                               a * apply_filter(S, X1, H) + b * apply_filter(S, X2, H),
                               rtol=0, atol=1e-9)


@given(seeds, st.integers(1, 30), st.integers(0, 4))
def test_message_passing_equals_dense(seed, N, K):
    rng = np.random.default_rng(seed)
    S, X, H = random_adjacency(rng, N), rng.normal(size=(N, 3)), rng.normal(size=(K + 1, 3, 2))
    np.testing.assert_allclose(message_passing_filter(S, X, H), apply_filter(S, X, H),
                               rtol=0, atol=1e-10)


def test_isolated_node_only_self_term(rng):
    S = np.zeros((3, 3))
    S[0, 1] = S[1, 0] = 1
    X, H = rng.normal(size=(3, 2)), rng.normal(size=(3, 2, 2))
    np.testing.assert_allclose(apply_filter(S, X, H)[2], X[2] @ H[0])


def test_batched_filter_matches_loop(rng):
    S, X, H = random_adjacency(rng, 6, batch=(4,)), rng.normal(size=(4, 6, 2)), rng.normal(size=(3, 2, 1))
    batched = apply_filter(S, X, H)
    for b in range(4):
        np.testing.assert_allclose(batched[b], apply_filter(S[b], X[b], H))


# apply_delayed_filter

def test_delayed_static_degeneracy(rng):
    S, X, H = random_adjacency(rng, 7), rng.normal(size=(7, 3)), rng.normal(size=(4, 3, 2))
    hist = GraphHistory.from_sequence(4, [S] * 6, [X] * 6)
    assert np.array_equal(apply_delayed_filter(hist, H), apply_filter(S, X, H))


@given(seeds, st.integers(1, 6))
def test_delayed_static_degeneracy_exact(seed, depth):
    rng = np.random.default_rng(seed)
    K = depth - 1
    S, X, H = random_adjacency(rng, 6), rng.integers(-3, 4, size=(6, 2)).astype(float), \
        rng.integers(-2, 3, size=(K + 1, 2, 2)).astype(float)
    hist = GraphHistory.from_sequence(depth, [S] * (depth + 2), [X] * (depth + 2))
    assert np.array_equal(apply_delayed_filter(hist, H), apply_filter(S, X, H))


def test_delayed_zero_hop(rng):
    S_seq, X_seq = random_sequence(rng, 5, 4, 3)
    H = rng.normal(size=(1, 3, 2))
    hist = GraphHistory.from_sequence(5, S_seq, X_seq)
    np.testing.assert_allclose(apply_delayed_filter(hist, H), X_seq[-1] @ H[0])


def test_delayed_only_current_graph_multiplies_lag_one():
    A = np.array([[0, 1], [1, 0]], float)
    hist = GraphHistory(2)
    hist.push(np.zeros((2, 2)), np.array([[1.0], [0.0]]))   # time t-1
    hist.push(A, np.array([[5.0], [7.0]]))                   # time t
    H = np.array([[[0.0]], [[1.0]]])
    np.testing.assert_array_equal(apply_delayed_filter(hist, H), [[0.0], [1.0]])


def test_delayed_against_explicit_products(rng):
    T, N, K = 7, 5, 3
    S_seq, X_seq = random_sequence(rng, T, N, 2)
    H = rng.normal(size=(K + 1, 2, 3))
    hist = GraphHistory.from_sequence(K + 1, S_seq, X_seq)
    t = T - 1
    want = np.zeros((N, 3))
    for k in range(K + 1):
        prod = np.eye(N)
        for m in range(k):
            prod = prod @ S_seq[t - m]
        want += prod @ X_seq[t - k] @ H[k]
    np.testing.assert_allclose(apply_delayed_filter(hist, H), want, atol=1e-10)


def test_delayed_short_history_zero_padded(rng):
    S_seq, X_seq = random_sequence(rng, 2, 4, 2)
    H = rng.normal(size=(4, 2, 1))
    hist = GraphHistory.from_sequence(4, S_seq, X_seq)
    want = X_seq[1] @ H[0] + S_seq[1] @ X_seq[0] @ H[1]
    np.testing.assert_allclose(apply_delayed_filter(hist, H), want)


def test_delayed_empty_history():
    with pytest.raises(InvalidInputError):
        apply_delayed_filter(GraphHistory(3), np.zeros((3, 1, 1)))


@given(seeds, st.integers(2, 20), st.integers(0, 4))
def test_delayed_permutation_equivariance(seed, N, K):
    rng = np.random.default_rng(seed)
    S_seq, X_seq = random_sequence(rng, K + 3, N, 3)
    H = rng.normal(size=(K + 1, 3, 2))
    perm = rng.permutation(N)
    hist = GraphHistory.from_sequence(K + 1, S_seq, X_seq)
    np.testing.assert_allclose(apply_delayed_filter(hist.permuted(perm), H),
                               apply_delayed_filter(hist, H)[perm], rtol=0, atol=1e-10)


@given(seeds, st.integers(2, 12), st.integers(0, 3))
def test_delayed_locality_time_expanded(seed, N, K):
    rng = np.random.default_rng(seed)
    S_seq, X_seq = random_sequence(rng, K + 1, N, 2)
    H = rng.normal(size=(K + 1, 2, 2))
    hist = GraphHistory.from_sequence(K + 1, S_seq, X_seq)
    newest_first = S_seq[::-1]
    full = apply_delayed_filter(hist, H)
    for i in range(N):
        reach = delayed_reach(newest_first, i, K)
        Xm = np.zeros_like(X_seq)
        for k in range(K + 1):
            rows = sorted(reach[k])
            Xm[K - k, rows] = X_seq[K - k, rows]
        masked = apply_delayed_filter(GraphHistory.from_sequence(K + 1, S_seq, Xm), H)
        np.testing.assert_allclose(masked[i], full[i], rtol=0, atol=1e-12)


@given(seeds, st.integers(1, 15), st.integers(0, 4))
def test_distributed_delayed_filter(seed, N, K):
    rng = np.random.default_rng(seed)
    S_seq, X_seq = random_sequence(rng, K + 3, N, 2)
    H = rng.normal(size=(K + 1, 2, 3))
    local = run_distributed_delayed_filter(S_seq, X_seq, H)
    for t in range(len(S_seq)):
        hist = GraphHistory.from_sequence(K + 1, S_seq[:t + 1], X_seq[:t + 1])
        np.testing.assert_allclose(local[t], apply_delayed_filter(hist, H), rtol=0, atol=1e-10)


def test_history_ring_buffer_evicts_oldest(rng):
    hist = GraphHistory(2)
    for t in range(4):
        hist.push(np.zeros((2, 2)), np.full((2, 1), float(t)))
    assert len(hist) == 2 and hist.time == 3
    assert hist[0][1][0, 0] == 3 and hist[1][1][0, 0] == 2


def test_history_shape_consistency():
    hist = GraphHistory(3).push(np.zeros((2, 2)), np.zeros((2, 1)))
    with pytest.raises(InvalidInputError):
        hist.push(np.zeros((3, 3)), np.zeros((3, 1)))


# permutations

def test_permute_identity(rng):
    S, X = random_adjacency(rng, 5), rng.normal(size=(5, 2))
    Xp, Sp = permute(np.arange(5), X, S)
    assert np.array_equal(Xp, X) and np.array_equal(Sp, S)


def test_swap_twice_is_identity(rng):
    S, X = random_adjacency(rng, 2, p=1.0), rng.normal(size=(2, 3))
    perm = np.array([1, 0])
    Xp, Sp = permute(perm, *permute(perm, X, S))
    assert np.array_equal(Xp, X) and np.array_equal(Sp, S)


def test_cycle_matches_dense_products():
    S = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
    X = np.array([[1.0], [2.0], [3.0]])
    perm = np.array([2, 0, 1])
    P = permutation_matrix(perm)
    assert np.count_nonzero(P, axis=0).tolist() == [1, 1, 1]
    Xp, Sp = permute(perm, X, S)
    np.testing.assert_array_equal(Xp, P.T @ X)
    np.testing.assert_array_equal(Sp, P.T @ S @ P)
    np.testing.assert_array_equal(Xp.ravel(), [3, 1, 2])


@given(seeds, st.integers(1, 20))
def test_inverse_permutation_recovers(seed, N):
    rng = np.random.default_rng(seed)
    S, X = random_adjacency(rng, N), rng.normal(size=(N, 2))
    perm = rng.permutation(N)
    Xb, Sb = permute(inverse_permutation(perm), *permute(perm, X, S))
    assert np.array_equal(Xb, X) and np.array_equal(Sb, S)


@pytest.mark.parametrize("bad", [[0, 0, 1], [0, 1, 3], [[0, 1, 2]], [0.0, 1.0, 2.0]])
def test_non_bijection_rejected(bad):
    with pytest.raises(InvalidInputError):
        check_permutation(np.array(bad), 3)


# k-hop neighbourhoods

def test_khop_base_case():
    assert khop_mask(PATH3, 1, 0) == {1}


def test_khop_path():
    assert khop_mask(PATH3, 0, 1) == {0, 1}
    assert khop_mask(PATH3, 0, 5) == {0, 1, 2}


def test_khop_out_of_range():
    with pytest.raises(InvalidInputError):
        khop_mask(PATH3, 3, 1)
    with pytest.raises(InvalidInputError):
        khop_mask(PATH3, 0, -1)


@given(seeds, st.integers(1, 15), st.integers(0, 5))
def test_khop_matches_matrix_reachability(seed, N, k):
    rng = np.random.default_rng(seed)
    S = random_adjacency(rng, N, p=0.2)
    reach = np.linalg.matrix_power(np.eye(N) + S, k)
    i = int(rng.integers(N))
    assert khop_mask(S, i, k) == set(np.flatnonzero(reach[i]).tolist())
