"""Behaviour cloning of the flocking expert with ADAM.

Training minimises the per-entry mean squared error between controller and
expert actions along expert trajectories. Every ``validate_every`` steps the
current controller is rolled out from the validation initial conditions and
the parameters with the lowest mean cumulative velocity variation are kept.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .arch import ModelParams, init_params
from .backprop import NumericalError, loss_and_gradient
from .flocking import GNNPolicy, SwarmState, Trajectory, rollout
from .gsp import InvalidInputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 20
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validate_every: int = 5
    seed: int = 0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.validate_every < 1:
            raise InvalidInputError(f"invalid training schedule {self}")
        if not self.lr > 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise InvalidInputError(f"invalid optimiser settings {self}")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state, params, grad, cfg):
    """One bias-corrected ADAM update; returns ``(new_state, new_params)``."""
    grad = np.asarray(grad, dtype=np.float64)
    theta = params.flat()
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise InvalidInputError("gradient, moments and parameters must have equal length")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return AdamState(m, v, t), ModelParams.from_flat(params.hyper, theta)


def imitation_loss(U_pred, U_expert):
    """Mean squared error over agents and action components."""
    U_pred = np.asarray(U_pred, dtype=np.float64)
    U_expert = np.asarray(U_expert, dtype=np.float64)
    if U_pred.shape != U_expert.shape:
        raise InvalidInputError(f"shapes differ: {U_pred.shape} vs {U_expert.shape}")
    return float(np.mean((U_pred - U_expert) ** 2))


def l21_norm(X):
    """Sum over columns of the column 2-norms (reporting metric)."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.sum(np.sqrt(np.sum(X * X, axis=-2))))


@dataclass
class Dataset:
    """Expert trajectories split into train/validation/test sets."""

    cfg: object
    train: Trajectory
    valid: Trajectory
    test: Trajectory
    seed: int = 0

    def initial_states(self, split):
        traj = getattr(self, split)
        return SwarmState(traj.positions[:, 0], traj.velocities[:, 0], 0)

    def permuted(self, perm):
        """Relabel agents of every trajectory with the same permutation."""
        def relabel(tr):
            return Trajectory(tr.positions[:, :, perm], tr.velocities[:, :, perm],
                              tr.S[:, :, perm][:, :, :, perm], tr.X[:, :, perm],
                              tr.U[:, :, perm], tr.cost, tr.failed, tr.failure_time)
        return Dataset(self.cfg, relabel(self.train), relabel(self.valid),
                       relabel(self.test), self.seed)


def batch_arrays(traj, idx):
    return traj.S[idx].astype(np.float64), traj.X[idx], traj.U[idx]


def compute_gradients(params, batch):
    """Gradient of the mean batch loss; ``batch`` is a ``Trajectory``."""
    idx = np.arange(len(batch))
    return loss_and_gradient(params, *batch_arrays(batch, idx))[1]


def validation_cost(params, dataset, split="valid"):
    """Mean cumulative velocity variation of closed-loop rollouts."""
    traj = rollout(GNNPolicy(params), dataset.initial_states(split), dataset.cfg, record=False)
    return float(np.mean(traj.cumulative_cost))


def imitation_error(params, dataset, split="valid"):
    """Mean squared imitation error on a split (no rollout)."""
    traj = getattr(dataset, split)
    return loss_and_gradient(params, *batch_arrays(traj, np.arange(len(traj))))[0]


@dataclass
class LogEntry:
    step: int
    train_mse: float
    val_cost: float
    wall_time: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)
    best_step: int = 0
    best_val_cost: float = math.inf
    error: str = None

    def log_rows(self):
        return [[e.step, e.train_mse, e.val_cost, e.wall_time] for e in self.log]


def batch_schedule(n_train, cfg):
    """Per-epoch lists of training indices, fixed by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(n_train)
        yield [order[i:i + cfg.batch_size] for i in range(0, n_train, cfg.batch_size)]


def train_imitation(dataset, hyper, cfg, init=None, validate=None, max_seconds=None):
    """Fit ``hyper`` to the expert actions in ``dataset.train``.

    ``validate(params) -> float`` replaces the rollout-based validation cost
    when given. Training stops early (with ``error`` set) once ``max_seconds``
    of wall time are used. Returns a ``TrainResult`` whose params are the
    validated best.
    """
    params = init if init is not None else init_params(hyper, cfg.seed)
    validate = validate or (lambda p: validation_cost(p, dataset))
    result = TrainResult(params)
    if cfg.epochs == 0:
        return result
    n_train = len(dataset.train)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    last_step = cfg.epochs * steps_per_epoch
    adam = AdamState.zeros(params.flat().size)
    start = time.perf_counter()
    step = 0
    first_loss = None
    for epoch, batches in enumerate(batch_schedule(n_train, cfg)):
        for idx in batches:
            step += 1
            try:
                loss, grad = loss_and_gradient(params, *batch_arrays(dataset.train, idx))
            except NumericalError as exc:
                result.error = f"step {step}: {exc}"
                log.warning("training aborted: %s", result.error)
                return result
            if first_loss is None:
                first_loss = loss
            # heavy-tailed features can make the starting loss itself large
            if not np.isfinite(loss) or loss > cfg.divergence_limit * max(1.0, first_loss):
                result.error = f"step {step}: loss diverged ({loss:g})"
                log.warning("training aborted: %s", result.error)
                return result
            adam, params = adam_step(adam, params, grad, cfg)
            val = math.nan
            if step % cfg.validate_every == 0 or step == last_step:
                val = validate(params)
                if val < result.best_val_cost:
                    result.params, result.best_val_cost, result.best_step = params, val, step
            elapsed = time.perf_counter() - start
            result.log.append(LogEntry(step, loss, val, elapsed))
            if max_seconds is not None and elapsed > max_seconds:
                result.error = f"step {step}: wall-clock budget of {max_seconds:g} s exhausted"
                log.warning("training stopped: %s", result.error)
                return result
        log.info("epoch %d: last loss %.4g, best validation cost %.4g",
                 epoch + 1, loss, result.best_val_cost)
    return result
