"""Graph filter, GCNN and GRNN controllers over unit-delay histories.

Every architecture is two stages. The first stage communicates over the
time-varying graph (a unit-delay filter of order ``K``); the second is a
readout filter of order ``K_out`` (zero for flocking, so it is a per-agent
linear map).

* ``GF``   -- two filters, no nonlinearity.
* ``GCNN`` -- ``rho(readout(sigma(delayed_filter(X))))``.
* ``GRNN`` -- hidden state ``Z(t) = sigma(A(X history) + B(Z history))`` and
  output ``rho(C(Z(t)))``.
"""

from dataclasses import dataclass, field

import numpy as np

from .gsp import GraphHistory, InvalidInputError, apply_delayed_filter, apply_filter

ARCH_KINDS = ("GF", "GCNN", "GRNN")

# name -> (f, f' expressed through the output y = f(x))
NONLINEARITIES = {
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
}


@dataclass(frozen=True)
class ArchHyper:
    arch_kind: str
    G: int
    K: int
    F_in: int = 6
    F_out: int = 2
    K_out: int = 0
    sigma: str = None
    rho: str = "identity"

    def __post_init__(self):
        if self.arch_kind not in ARCH_KINDS:
            raise InvalidInputError(f"unknown architecture {self.arch_kind!r}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", "identity" if self.arch_kind == "GF" else "tanh")
        if self.arch_kind == "GF" and self.sigma != "identity":
            raise InvalidInputError("GF has no hidden nonlinearity")
        if self.G < 1 or self.K < 0 or self.K_out < 0 or self.F_in < 1 or self.F_out < 1:
            raise InvalidInputError(f"invalid hyperparameters {self}")
        for name in (self.sigma, self.rho):
            if name not in NONLINEARITIES:
                raise InvalidInputError(f"unknown nonlinearity {name!r}")

    def tensor_shapes(self):
        """Ordered ``{name: (K+1, F_in, F_out)}`` for every tap tensor."""
        if self.arch_kind == "GRNN":
            return {
                "A": (self.K + 1, self.F_in, self.G),
                "B": (self.K + 1, self.G, self.G),
                "C": (self.K_out + 1, self.G, self.F_out),
            }
        return {
            "layer1": (self.K + 1, self.F_in, self.G),
            "layer2": (self.K_out + 1, self.G, self.F_out),
        }

    def as_dict(self):
        return {
            "arch_kind": self.arch_kind, "G": self.G, "K": self.K, "F_in": self.F_in,
            "F_out": self.F_out, "K_out": self.K_out, "sigma": self.sigma, "rho": self.rho,
        }


def param_count(hyper):
    return int(sum(np.prod(s) for s in hyper.tensor_shapes().values()))


@dataclass(frozen=True)
class ModelParams:
    """Tap tensors of one controller, keyed as in ``ArchHyper.tensor_shapes``."""

    hyper: ArchHyper
    taps: dict = field(repr=False)

    def __post_init__(self):
        shapes = self.hyper.tensor_shapes()
        if list(self.taps) != list(shapes):
            raise InvalidInputError(f"expected tensors {list(shapes)}, got {list(self.taps)}")
        for name, shape in shapes.items():
            if self.taps[name].shape != shape:
                raise InvalidInputError(
                    f"{name} has shape {self.taps[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.taps[name]

    def flat(self):
        """All taps concatenated in ``tensor_shapes`` order, each C-ordered."""
        return np.concatenate([t.ravel() for t in self.taps.values()])

    @classmethod
    def from_flat(cls, hyper, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (param_count(hyper),):
            raise InvalidInputError(
                f"flat vector has {vector.shape}, expected ({param_count(hyper)},)")
        taps, offset = {}, 0
        for name, shape in hyper.tensor_shapes().items():
            size = int(np.prod(shape))
            taps[name] = vector[offset:offset + size].reshape(shape).copy()
            offset += size
        return cls(hyper, taps)

    @classmethod
    def zeros(cls, hyper):
        return cls.from_flat(hyper, np.zeros(param_count(hyper)))


def init_params(hyper, seed):
    """Uniform fan-in initialisation, bound ``1/sqrt(F_in * (K+1))`` per tensor."""
    rng = np.random.default_rng(seed)
    taps = {}
    for name, (k1, f_in, f_out) in hyper.tensor_shapes().items():
        bound = 1.0 / np.sqrt(f_in * k1)
        taps[name] = rng.uniform(-bound, bound, size=(k1, f_in, f_out))
    return ModelParams(hyper, taps)


def _act(name):
    return NONLINEARITIES[name][0]


def gcnn_forward(params, hist):
    """Actions at the newest time of ``hist`` for a GF or GCNN."""
    hyper = params.hyper
    if hyper.arch_kind == "GRNN":
        raise InvalidInputError("use grnn_step for recurrent controllers")
    S_now = hist[0][0]
    hidden = _act(hyper.sigma)(apply_delayed_filter(hist, params["layer1"]))
    return _act(hyper.rho)(apply_filter(S_now, hidden, params["layer2"]))


@dataclass
class HiddenState:
    """GRNN memory: the latest hidden signal and its delayed history.

    ``z_history`` holds ``(S(tau), Z(tau))`` up to the previous time step;
    it is owned by a single rollout.
    """

    Z: np.ndarray
    z_history: GraphHistory

    @classmethod
    def initial(cls, hyper, batch_shape, N):
        return cls(np.zeros(tuple(batch_shape) + (N, hyper.G)), GraphHistory(hyper.K + 1))


def grnn_step(params, x_hist, state):
    """Advance a GRNN one tick; returns ``(new_state, U(t))``.

    ``state`` must describe time ``t-1`` when ``x_hist`` ends at ``t``.
    """
    hyper = params.hyper
    if hyper.arch_kind != "GRNN":
        raise InvalidInputError("grnn_step needs a GRNN parameter set")
    if state.z_history.time != x_hist.time - 1:
        raise InvalidInputError(
            f"hidden history at t={state.z_history.time} does not precede input at t={x_hist.time}")
    pre = apply_delayed_filter(x_hist, params["A"])
    if len(state.z_history):
        pre = pre + apply_delayed_filter(state.z_history, params["B"])
    Z = _act(hyper.sigma)(pre)
    S_now = x_hist[0][0]
    U = _act(hyper.rho)(apply_filter(S_now, Z, params["C"]))
    z_hist = state.z_history.copy().push(S_now, Z)
    return HiddenState(Z, z_hist), U
