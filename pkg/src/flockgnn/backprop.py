"""Whole-trajectory forward passes and their exact reverse-mode gradients.

Arrays carry a leading batch axis ``B`` and a time axis ``T``: shift operators
are ``(B, T, N, N)``, signals ``(B, T, N, F)``. Shift operators are data, so no
gradient flows into them.
"""

import numpy as np

from .arch import NONLINEARITIES, ModelParams
from .gsp import InvalidInputError


class NumericalError(FloatingPointError):
    """A forward pass produced a non-finite value."""

    def __init__(self, step, what="output"):
        super().__init__(f"non-finite {what} at time step {step}")
        self.step = step


def delayed_diffusion(S, X, K):
    """Stack of delayed shifts ``W[k][:, t] = S(t) ... S(t-k+1) X(t-k)``.

    Shape ``(K+1, B, T, N, F)``; lags before the first step are zero.
    """
    W = np.zeros((K + 1,) + X.shape)
    W[0] = X
    for k in range(1, K + 1):
        W[k][:, k:] = S[:, k:] @ W[k - 1][:, k - 1:-1]
    return W


def _static_readout(S, Z, C):
    """Readout filter with the current graph; returns output and diffusions."""
    D = [Z]
    out = Z @ C[0]
    for k in range(1, C.shape[0]):
        D.append(S @ D[-1])
        out = out + D[-1] @ C[k]
    return out, D


def _static_readout_backward(S, D, C, d_out):
    dC = np.stack([np.tensordot(Dk, d_out, axes=(range(Dk.ndim - 1), range(d_out.ndim - 1)))
                   for Dk in D])
    dD = d_out @ C[-1].T
    for k in range(C.shape[0] - 1, 0, -1):
        dD = np.swapaxes(S, -1, -2) @ dD + d_out @ C[k - 1].T
    return dC, dD


def _contract(W, d):
    """``sum over samples of W_k^T d`` for every k."""
    axes = list(range(d.ndim - 1))
    return np.stack([np.tensordot(Wk, d, axes=(axes, axes)) for Wk in W])


def _first_bad_step(*arrays):
    T = arrays[0].shape[1]
    for t in range(T):
        if not all(np.all(np.isfinite(a[:, t])) for a in arrays):
            return t
    return T - 1


def _check_batch(params, S, X):
    hyper = params.hyper
    if S.ndim != 4 or X.ndim != 4 or S.shape[:3] != X.shape[:3] or S.shape[-1] != S.shape[-2]:
        raise InvalidInputError(f"batch shapes do not line up: S {S.shape}, X {X.shape}")
    if X.shape[-1] != hyper.F_in:
        raise InvalidInputError(f"model expects {hyper.F_in} features, got {X.shape[-1]}")


def _forward(params, S, X):
    hyper = params.hyper
    sigma = NONLINEARITIES[hyper.sigma][0]
    rho = NONLINEARITIES[hyper.rho][0]
    cache = {}
    if hyper.arch_kind == "GRNN":
        A, Bt, C = params["A"], params["B"], params["C"]
        WX = delayed_diffusion(S, X, hyper.K)
        pre_x = sum(WX[k] @ A[k] for k in range(hyper.K + 1))
        nb, T, n = X.shape[:3]
        Z = np.empty((nb, T, n, hyper.G))
        # WZ[k][:, t] = S(t-1) ... S(t-k) Z(t-1-k); k = 0 is Z(t-1) itself
        WZ = np.zeros((hyper.K + 1, nb, T, n, hyper.G))
        for t in range(T):
            pre = pre_x[:, t]
            if t > 0:
                WZ[0][:, t] = Z[:, t - 1]
                for k in range(1, min(hyper.K, t) + 1):
                    WZ[k][:, t] = S[:, t - 1] @ WZ[k - 1][:, t - 1]
                for k in range(min(hyper.K, t) + 1):
                    pre = pre + WZ[k][:, t] @ Bt[k]
            Z[:, t] = sigma(pre)
        out, D = _static_readout(S, Z, C)
        cache.update(WX=WX, WZ=WZ, Z=Z, D=D)
        hidden = Z
    else:
        H1, H2 = params["layer1"], params["layer2"]
        W = delayed_diffusion(S, X, hyper.K)
        hidden = sigma(sum(W[k] @ H1[k] for k in range(hyper.K + 1)))
        out, D = _static_readout(S, hidden, H2)
        cache.update(W=W, hidden=hidden, D=D)
    U = rho(out)
    if not np.all(np.isfinite(U)):
        raise NumericalError(_first_bad_step(hidden, U))
    cache["U"] = U
    return U, cache


def trajectory_forward(params, S, X):
    """Controller outputs for every time step of every trajectory in the batch."""
    S = np.asarray(S, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_batch(params, S, X)
    return _forward(params, S, X)[0]


def loss_and_gradient(params, S, X, U_target):
    """Mean squared imitation error over all entries and its gradient.

    Returns ``(loss, flat_gradient)`` with the gradient ordered like
    ``ModelParams.flat``.
    """
    S = np.asarray(S, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    U_target = np.asarray(U_target, dtype=np.float64)
    _check_batch(params, S, X)
    hyper = params.hyper
    U, cache = _forward(params, S, X)
    if U.shape != U_target.shape:
        raise InvalidInputError(f"targets {U_target.shape} do not match outputs {U.shape}")
    err = U - U_target
    loss = float(np.mean(err * err))
    d_out = (2.0 / err.size) * err * NONLINEARITIES[hyper.rho][1](U)
    sigma_prime = NONLINEARITIES[hyper.sigma][1]

    if hyper.arch_kind != "GRNN":
        dH2, d_hidden = _static_readout_backward(S, cache["D"], params["layer2"], d_out)
        d_pre = d_hidden * sigma_prime(cache["hidden"])
        dH1 = _contract(cache["W"], d_pre)
        grad = ModelParams(hyper, {"layer1": dH1, "layer2": dH2})
        return loss, grad.flat()

    Bt = params["B"]
    Z, WZ = cache["Z"], cache["WZ"]
    dC, dZ_out = _static_readout_backward(S, cache["D"], params["C"], d_out)
    St = np.swapaxes(S, -1, -2)
    T = Z.shape[1]
    K = hyper.K
    d_pre = np.empty_like(Z)
    dB = np.zeros_like(Bt)
    # pending[k]: gradient reaching WZ[k][:, t] from WZ[k+1][:, t+1]
    pending = np.zeros((K + 1,) + Z[:, 0].shape)
    carry = np.zeros_like(Z[:, 0])
    for t in range(T - 1, -1, -1):
        dZ = dZ_out[:, t] + carry
        dp = dZ * sigma_prime(Z[:, t])
        d_pre[:, t] = dp
        carry = np.zeros_like(carry)
        new_pending = np.zeros_like(pending)
        if t > 0:
            top = min(K, t)
            dWZ = [dp @ Bt[k].T + pending[k] for k in range(top + 1)]
            for k in range(top + 1):
                dB[k] += np.tensordot(WZ[k][:, t], dp, axes=([0, 1], [0, 1]))
            carry = dWZ[0]
            for k in range(1, top + 1):
                new_pending[k - 1] = St[:, t - 1] @ dWZ[k]
        pending = new_pending
    dA = _contract(cache["WX"], d_pre)
    grad = ModelParams(hyper, {"A": dA, "B": dB, "C": dC})
    return loss, grad.flat()
