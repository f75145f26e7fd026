"""Randomised invariant checks shared by ``flockgnn proptest`` and the tests.

Each check draws its own instances from a ``numpy.random.Generator`` and
returns the worst deviation it saw, so callers choose the tolerance.
"""

import time

import numpy as np

from .arch import ArchHyper, HiddenState, gcnn_forward, grnn_step, init_params
from .backprop import loss_and_gradient
from .gsp import (GraphHistory, apply_delayed_filter, apply_filter, message_passing_filter,
                  run_distributed_delayed_filter)

ARCHS = ("GF", "GCNN", "GRNN")


def random_adjacency(rng, N, p=None, batch=()):
    """Symmetric binary adjacency with zero diagonal; edge probability ``p``."""
    p = rng.uniform(0.1, 0.5) if p is None else p
    upper = np.triu(rng.uniform(size=tuple(batch) + (N, N)) < p, 1)
    return (upper | np.swapaxes(upper, -1, -2)).astype(np.float64)


def random_sequence(rng, T, N, F):
    return random_adjacency(rng, N, batch=(T,)), rng.normal(size=(T, N, F))


def run_controller(params, S_seq, X_seq):
    """Outputs ``(T, N, F_out)`` of a controller driven by a graph sequence."""
    hyper = params.hyper
    hist = GraphHistory(hyper.K + 1)
    state = HiddenState.initial(hyper, (), X_seq.shape[1])
    out = []
    for S, X in zip(S_seq, X_seq):
        hist.push(S, X)
        if hyper.arch_kind == "GRNN":
            state, U = grnn_step(params, hist, state)
        else:
            U = gcnn_forward(params, hist)
        out.append(U)
    return np.array(out)


def permutation_deviation(arch, rng, N=20, T=6):
    """``max |f(P^T inputs) - P^T f(inputs)|`` for one random instance.

    ``arch`` is ``"filter"``, ``"delayed"`` or an architecture name; the
    controllers are run over a ``T``-step time-varying graph sequence.
    """
    perm = rng.permutation(N)
    K = int(rng.integers(0, 5))
    if arch == "filter":
        S, X = random_adjacency(rng, N), rng.normal(size=(N, 4))
        H = rng.normal(size=(K + 1, 4, 3))
        return np.max(np.abs(apply_filter(S[perm][:, perm], X[perm], H)
                             - apply_filter(S, X, H)[perm]))
    S_seq, X_seq = random_sequence(rng, T, N, 6)
    Sp_seq, Xp_seq = S_seq[:, perm][:, :, perm], X_seq[:, perm]
    if arch == "delayed":
        H = rng.normal(size=(K + 1, 6, 3))
        a = apply_delayed_filter(GraphHistory.from_sequence(K + 1, Sp_seq, Xp_seq), H)
        b = apply_delayed_filter(GraphHistory.from_sequence(K + 1, S_seq, X_seq), H)
        return np.max(np.abs(a - b[perm]))
    params = init_params(ArchHyper(arch, G=int(rng.integers(1, 9)), K=K), int(rng.integers(2**31)))
    a = run_controller(params, Sp_seq, Xp_seq)
    b = run_controller(params, S_seq, X_seq)[:, perm]
    return np.max(np.abs(a - b))


def finite_difference_error(arch, rng, N=5, T=10, h=1e-5, floor=1e-6):
    """Worst relative error of the analytic gradient against central differences.

    The relative error of one entry is ``|a - f| / max(|a|, |f|, floor)``, so
    entries whose true gradient is below ``floor`` are compared absolutely.
    Returns ``{tensor: error}``.
    """
    G = int(rng.integers(2, 5))
    K = int(rng.integers(1, 4))
    hyper = ArchHyper(arch, G=G, K=K, K_out=int(rng.integers(0, 2)))
    params = init_params(hyper, int(rng.integers(2**31)))
    # scale up so tanh is exercised away from its linear region
    params = type(params).from_flat(hyper, 2.0 * params.flat())
    B = 2
    S = random_adjacency(rng, N, batch=(B, T))
    X = rng.normal(size=(B, T, N, hyper.F_in))
    U = rng.normal(size=(B, T, N, hyper.F_out))
    _, grad = loss_and_gradient(params, S, X, U)
    theta = params.flat()
    numeric = np.empty_like(theta)
    for n in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[n] += h
        minus[n] -= h
        lp = loss_and_gradient(type(params).from_flat(hyper, plus), S, X, U)[0]
        lm = loss_and_gradient(type(params).from_flat(hyper, minus), S, X, U)[0]
        numeric[n] = (lp - lm) / (2 * h)
    rel = np.abs(grad - numeric) / np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), floor)
    out, offset = {}, 0
    for name, shape in hyper.tensor_shapes().items():
        size = int(np.prod(shape))
        out[name] = float(rel[offset:offset + size].max())
        offset += size
    return out


def distributed_deviation(rng, N_max=30, K_max=4):
    """Static and unit-delay filters: node-local evaluation vs dense evaluation."""
    N = int(rng.integers(2, N_max + 1))
    K = int(rng.integers(0, K_max + 1))
    F_in, F_out = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    H = rng.normal(size=(K + 1, F_in, F_out))
    S, X = random_adjacency(rng, N), rng.normal(size=(N, F_in))
    static = np.max(np.abs(message_passing_filter(S, X, H) - apply_filter(S, X, H)))
    S_seq, X_seq = random_sequence(rng, K + 3, N, F_in)
    local = run_distributed_delayed_filter(S_seq, X_seq, H)
    dense = [apply_delayed_filter(GraphHistory.from_sequence(K + 1, S_seq[:t + 1],
                                                             X_seq[:t + 1]), H)
             for t in range(len(S_seq))]
    return max(static, float(np.max(np.abs(local - np.array(dense)))))


def run_all(seed=0, instances=100, verbose=True):
    """Run every suite once; prints one line per suite and returns overall success."""
    rng = np.random.default_rng(seed)
    ok = True

    def report(name, value, tol, elapsed):
        nonlocal ok
        passed = value <= tol
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name}: worst {value:.3g} "
                  f"(tol {tol:g}, {elapsed:.1f}s)")

    for arch in ("filter", "delayed") + ARCHS:
        start = time.perf_counter()
        worst = max(permutation_deviation(arch, rng) for _ in range(instances))
        report(f"permutation equivariance [{arch}]", worst, 1e-9, time.perf_counter() - start)
    for arch in ARCHS:
        start = time.perf_counter()
        worst = max(max(finite_difference_error(arch, rng).values()) for _ in range(10))
        report(f"gradient vs finite differences [{arch}]", worst, 1e-4,
               time.perf_counter() - start)
    start = time.perf_counter()
    worst = max(distributed_deviation(rng) for _ in range(50))
    report("distributed equivalence", worst, 1e-10, time.perf_counter() - start)
    return ok
