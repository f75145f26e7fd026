"""Graph signals, shift operators and (unit-delay) graph filters.

Conventions
-----------
A graph signal is an ``N x F`` float array whose row ``i`` holds the feature
vector of agent ``i``. A shift operator is an ``N x N`` array with the sparsity
of the communication graph; here it is always the binary adjacency matrix.
Filter taps are stacked into a single array of shape ``(K+1, F_in, F_out)``.

All functions accept arbitrary leading batch dimensions, so ``(B, N, F)``
signals paired with ``(B, N, N)`` operators are filtered independently.
"""

from collections import deque

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or inconsistent arrays."""


def _check_pair(S, X):
    S = np.asarray(S, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise InvalidInputError(f"shift operator must be square, got {S.shape}")
    if X.ndim < 2 or X.shape[-2] != S.shape[-1]:
        raise InvalidInputError(
            f"signal with {X.shape} does not match shift operator {S.shape}")
    return S, X


def _check_taps(H, F_in):
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 3:
        raise InvalidInputError(f"taps must have shape (K+1, F_in, F_out), got {H.shape}")
    if H.shape[1] != F_in:
        raise InvalidInputError(f"taps expect {H.shape[1]} input features, signal has {F_in}")
    return H


def build_disk_graph(positions, radius):
    """Binary adjacency of agents within ``radius`` of each other.

    ``positions`` has shape ``(..., N, 2)``; the result has ``(..., N, N)``
    with a zero diagonal.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    if not np.all(np.isfinite(positions)):
        raise InvalidInputError("positions must be finite")
    diff = positions[..., :, None, :] - positions[..., None, :, :]
    dist2 = np.einsum("...d,...d->...", diff, diff)
    S = (dist2 <= radius * radius).astype(np.float64)
    n = S.shape[-1]
    S[..., np.arange(n), np.arange(n)] = 0.0
    return S


def shift(S, X):
    """One communication round: returns ``S @ X``."""
    S, X = _check_pair(S, X)
    return S @ X


def apply_filter(S, X, H):
    """Static graph filter ``sum_k S^k X H_k`` by repeated shifting."""
    S, X = _check_pair(S, X)
    H = _check_taps(H, X.shape[-1])
    diffused = X
    Y = X @ H[0]
    for k in range(1, H.shape[0]):
        diffused = S @ diffused
        Y = Y + diffused @ H[k]
    return Y


class GraphHistory:
    """Ring buffer of the last ``depth`` (S, X) pairs, newest first.

    ``time`` is the index of the newest entry (-1 while empty). Entries may
    carry leading batch dimensions as long as all pushes agree.
    """

    def __init__(self, depth):
        if depth < 1:
            raise InvalidInputError("history depth must be at least 1")
        self.depth = depth
        self._buf = deque(maxlen=depth)
        self.time = -1

    def push(self, S, X):
        S, X = _check_pair(S, X)
        if self._buf:
            S0, X0 = self._buf[0]
            if S0.shape != S.shape or X0.shape != X.shape:
                raise InvalidInputError("history entries must share shapes")
        self._buf.appendleft((S, X))
        self.time += 1
        return self

    def __len__(self):
        return len(self._buf)

    def __getitem__(self, lag):
        return self._buf[lag]

    def __iter__(self):
        return iter(self._buf)

    def copy(self):
        new = GraphHistory(self.depth)
        new._buf = deque(self._buf, maxlen=self.depth)
        new.time = self.time
        return new

    def permuted(self, perm):
        """Return a copy with every entry relabelled by ``perm``."""
        new = GraphHistory(self.depth)
        for S, X in reversed(self._buf):
            Xp, Sp = permute(perm, X, S)
            new.push(Sp, Xp)
        new.time = self.time
        return new

    @classmethod
    def from_sequence(cls, depth, S_seq, X_seq):
        """Build a history by pushing ``(S_seq[t], X_seq[t])`` oldest first."""
        hist = cls(depth)
        for S, X in zip(S_seq, X_seq):
            hist.push(S, X)
        return hist


def apply_delayed_filter(hist, H):
    """Unit-delay graph filter over a history of time-varying graphs.

    Computes ``sum_k S(t) ... S(t-k+1) X(t-k) H_k``. Lags missing from the
    history (trajectory start) count as zero signals, so their terms vanish.
    Each term is diffused innermost-first and terms are summed in the same
    order as ``apply_filter``, so a constant history reproduces the static
    filter bit for bit.
    """
    if len(hist) == 0:
        raise InvalidInputError("empty history")
    X_now = hist[0][1]
    H = _check_taps(H, X_now.shape[-1])
    Y = X_now @ H[0]
    for k in range(1, min(H.shape[0], len(hist))):
        diffused = hist[k][1]
        for m in range(k - 1, -1, -1):
            diffused = hist[m][0] @ diffused
        Y = Y + diffused @ H[k]
    return Y


def check_permutation(perm, n=None):
    perm = np.asarray(perm)
    if perm.ndim != 1 or not np.issubdtype(perm.dtype, np.integer):
        raise InvalidInputError("permutation must be a 1-D integer array")
    if n is not None and perm.shape[0] != n:
        raise InvalidInputError(f"permutation has length {perm.shape[0]}, expected {n}")
    if not np.array_equal(np.sort(perm), np.arange(perm.shape[0])):
        raise InvalidInputError("array is not a bijection of 0..N-1")
    return perm


def permutation_matrix(perm):
    """Matrix ``P`` such that ``P.T @ X == X[perm]``."""
    perm = check_permutation(perm)
    return np.eye(perm.shape[0])[:, perm]


def inverse_permutation(perm):
    return np.argsort(check_permutation(perm))


def permute(perm, X, S):
    """Relabel agents: returns ``(P^T X, P^T S P)``."""
    S, X = _check_pair(S, X)
    perm = check_permutation(perm, S.shape[-1])
    return X[..., perm, :], S[..., perm, :][..., :, perm]


def neighbors(S, i):
    S = np.asarray(S)
    return [int(j) for j in np.flatnonzero(S[i]) if j != i]


def khop_mask(S, i, k):
    """Nodes within ``k`` hops of ``i`` (breadth-first)."""
    S = np.asarray(S)
    n = S.shape[0]
    if not 0 <= i < n:
        raise InvalidInputError(f"node index {i} out of range for N={n}")
    if k < 0:
        raise InvalidInputError("hop count must be non-negative")
    seen = {i}
    frontier = [i]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in neighbors(S, u):
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            break
        frontier = nxt
    return seen


def delayed_reach(S_seq, i, K):
    """Nodes whose lag-k signal can reach node ``i`` through a delayed filter.

    ``S_seq[m]`` is ``S(t-m)``. Entry ``k`` of the result is the set of ``j``
    with a walk of exactly ``k`` hops ``i -> ... -> j`` where hop ``m`` uses
    ``S(t-m)``.
    """
    reach = [{i}]
    for m in range(K):
        S = np.asarray(S_seq[m])
        reach.append({j for u in reach[-1] for j in np.flatnonzero(S[u])})
    return reach


def message_passing_filter(S, X, H):
    """Node-by-node evaluation of a static graph filter.

    Every node keeps only its own running value and, once per round, reads the
    values its one-hop neighbours held in the previous round. Used to check
    that the dense evaluation is realisable with local exchanges.
    """
    S, X = _check_pair(S, X)
    H = _check_taps(H, X.shape[-1])
    n = S.shape[0]
    nbrs = [neighbors(S, i) for i in range(n)]
    state = [X[i].copy() for i in range(n)]
    out = [state[i] @ H[0] for i in range(n)]
    for k in range(1, H.shape[0]):
        new_state = []
        for i in range(n):
            acc = S[i, i] * state[i]
            for j in nbrs[i]:
                acc = acc + S[i, j] * state[j]
            new_state.append(acc)
        state = new_state
        for i in range(n):
            out[i] = out[i] + state[i] @ H[k]
    return np.array(out)


class DelayedFilterAgent:
    """Local state of one node running a unit-delay graph filter.

    At every exchange the node receives the buffers its neighbours held at the
    previous tick, so lag-k information arrives k ticks late.
    """

    def __init__(self, H):
        self.H = np.asarray(H, dtype=np.float64)
        self.buffers = [np.zeros(self.H.shape[1]) for _ in range(self.H.shape[0])]

    def tick(self, x, weights, neighbor_buffers):
        """Advance one tick.

        ``weights[j]`` is the shift weight to neighbour ``j`` (including a
        possible self-weight under key ``None``) and ``neighbor_buffers[j]``
        that neighbour's buffers from the previous tick.
        """
        new = [np.asarray(x, dtype=np.float64)]
        for k in range(1, self.H.shape[0]):
            acc = weights.get(None, 0.0) * self.buffers[k - 1]
            for j, w in weights.items():
                if j is not None:
                    acc = acc + w * neighbor_buffers[j][k - 1]
            new.append(acc)
        self.buffers = new
        return sum(b @ h for b, h in zip(new, self.H))


def run_distributed_delayed_filter(S_seq, X_seq, H):
    """Simulate ``DelayedFilterAgent`` at every node over a trajectory.

    Returns the ``(T, N, F_out)`` outputs; matches ``apply_delayed_filter`` on
    the zero-padded history.
    """
    S_seq = np.asarray(S_seq, dtype=np.float64)
    X_seq = np.asarray(X_seq, dtype=np.float64)
    T, n = X_seq.shape[:2]
    agents = [DelayedFilterAgent(H) for _ in range(n)]
    outputs = []
    for t in range(T):
        previous = [a.buffers for a in agents]
        S = S_seq[t]
        ys = []
        for i, agent in enumerate(agents):
            weights = {j: S[i, j] for j in neighbors(S, i)}
            if S[i, i] != 0:
                weights[None] = S[i, i]
            ys.append(agent.tick(X_seq[t, i], weights, previous))
        outputs.append(ys)
    return np.array(outputs)
