"""Planar double-integrator flocking with a centralized expert.

Agents communicate over a disk graph; a policy receives the local features of
every agent plus the graph and returns accelerations, which are clipped and
integrated. Rollouts run a batch of independent swarms in lock-step, so
positions are ``(B, N, 2)`` throughout.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.sparse.csgraph import connected_components

from .arch import HiddenState, gcnn_forward, grnn_step
from .gsp import GraphHistory, InvalidInputError, build_disk_graph

SINGULAR_DISTANCE = 1e-9
CLIP_MODES = ("axis", "norm")
PLACEMENTS = ("uniform", "connected")


class CollisionError(ArithmeticError):
    """Two agents coincide; the collision-avoidance potential is singular."""


class ConfigurationError(RuntimeError):
    """Initial conditions cannot be sampled for the requested configuration."""


@dataclass(frozen=True)
class FlockingConfig:
    N: int = 50
    T_s: float = 0.01
    duration: float = 2.0
    R: float = 2.0
    R_CA: float = 1.0
    u_max: float = 10.0
    v_init_max: float = 3.0
    bias_max: float = 3.0
    min_init_dist: float = 0.1
    clip_mode: str = "axis"
    placement: str = "uniform"

    def __post_init__(self):
        if self.clip_mode not in CLIP_MODES:
            raise InvalidInputError(f"clip_mode must be one of {CLIP_MODES}")
        if self.placement not in PLACEMENTS:
            raise InvalidInputError(f"placement must be one of {PLACEMENTS}")
        if min(self.N, self.T_s, self.duration, self.R, self.R_CA, self.u_max,
               self.v_init_max, self.bias_max, self.min_init_dist) <= 0:
            raise InvalidInputError("flocking parameters must be positive")
        if self.R_CA >= self.R:
            raise InvalidInputError("collision distance must be below the communication radius")

    @property
    def T(self):
        return int(round(self.duration / self.T_s))

    @property
    def disc_radius(self):
        # area grows with N so agent density is size independent
        return np.sqrt(self.N) * self.R / 2

    def with_(self, **changes):
        return replace(self, **changes)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    time_index: int = 0

    def permuted(self, perm):
        return SwarmState(self.positions[..., perm, :], self.velocities[..., perm, :],
                          self.time_index)


def sample_initial_conditions(cfg, seed, max_rejections=10_000):
    """Random swarm in a disc of radius ``sqrt(N) R / 2`` with random velocities.

    ``placement="uniform"`` draws all positions i.i.d. in the disc and redraws
    the whole set until every pair is at least ``min_init_dist`` apart.
    ``placement="connected"`` places agents one at a time and keeps a candidate
    only if it is within ``R`` of an already placed agent, so the initial
    graph is connected.

    Velocities are uniform in ``[-v_init_max, v_init_max]`` per axis plus one
    bias velocity shared by the whole team.
    """
    rng = np.random.default_rng(seed)
    if cfg.placement == "uniform":
        pos = _uniform_positions(cfg, rng, max_rejections)
    else:
        pos = _connected_positions(cfg, rng, max_rejections)
    vel = rng.uniform(-cfg.v_init_max, cfg.v_init_max, size=(cfg.N, 2))
    bias = rng.uniform(-cfg.bias_max, cfg.bias_max, size=2)
    return SwarmState(pos, vel + bias, 0)


def _disc_points(rng, radius, n):
    r = radius * np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def _uniform_positions(cfg, rng, max_rejections):
    for _ in range(max_rejections):
        pos = _disc_points(rng, cfg.disc_radius, cfg.N)
        _, d2 = _pairwise(pos)
        if d2.min() >= cfg.min_init_dist ** 2:
            return pos
    raise ConfigurationError(f"{max_rejections} consecutive rejected configurations")


def _connected_positions(cfg, rng, max_rejections):
    pos = np.empty((cfg.N, 2))
    pos[0] = _disc_points(rng, cfg.disc_radius, 1)[0]
    placed, misses = 1, 0
    while placed < cfg.N:
        cand = _disc_points(rng, cfg.disc_radius, 1)[0]
        d = np.linalg.norm(pos[:placed] - cand, axis=1).min()
        if d < cfg.min_init_dist or d > cfg.R:
            misses += 1
            if misses >= max_rejections:
                raise ConfigurationError(
                    f"{misses} consecutive rejections placing agent {placed}")
            continue
        pos[placed] = cand
        placed += 1
        misses = 0
    return pos


def stack_states(states):
    return SwarmState(np.stack([s.positions for s in states]),
                      np.stack([s.velocities for s in states]), states[0].time_index)


def is_connected(S):
    return connected_components(np.asarray(S) > 0, directed=False)[0] == 1


def step_dynamics(state, U, cfg):
    U = np.asarray(U, dtype=np.float64)
    if U.shape != state.velocities.shape:
        raise InvalidInputError(f"actions {U.shape} do not match swarm {state.velocities.shape}")
    ts = cfg.T_s
    pos = U * (ts * ts / 2) + state.velocities * ts + state.positions
    vel = U * ts + state.velocities
    return SwarmState(pos, vel, state.time_index + 1)


def clip_acceleration(U, u_max, mode="norm"):
    """Bound accelerations by ``u_max``.

    ``mode="norm"`` rescales rows whose 2-norm exceeds ``u_max`` onto the ball
    boundary (direction preserved); ``mode="axis"`` clips each component to
    ``[-u_max, u_max]``.
    """
    if u_max <= 0:
        raise InvalidInputError("u_max must be positive")
    U = np.asarray(U, dtype=np.float64)
    if mode == "axis":
        return np.clip(U, -u_max, u_max)
    if mode != "norm":
        raise InvalidInputError(f"unknown clip mode {mode!r}")
    norm = np.linalg.norm(U, axis=-1, keepdims=True)
    scale = np.where(norm > u_max, u_max / np.where(norm > 0, norm, 1.0), 1.0)
    return U * scale


def ca_potential(r_i, r_j, R_CA):
    d2 = float(np.sum((np.asarray(r_i) - np.asarray(r_j)) ** 2))
    if d2 > R_CA * R_CA:
        return 1.0 / R_CA ** 2 - np.log(R_CA ** 2)
    return 1.0 / d2 - np.log(d2)


def ca_potential_gradient(r_i, r_j, R_CA):
    """Gradient of the collision-avoidance potential with respect to ``r_i``."""
    r_ij = np.asarray(r_i, dtype=np.float64) - np.asarray(r_j, dtype=np.float64)
    d = np.linalg.norm(r_ij)
    if d < SINGULAR_DISTANCE:
        raise CollisionError(f"agents at distance {d:g}")
    if d > R_CA:
        return np.zeros(2)
    return -2.0 * r_ij / d ** 4 - 2.0 * r_ij / d ** 2


def _pairwise(positions):
    """Offsets ``r_i - r_j`` and squared distances, diagonal masked to +inf."""
    r_ij = positions[..., :, None, :] - positions[..., None, :, :]
    d2 = np.einsum("...d,...d->...", r_ij, r_ij)
    n = d2.shape[-1]
    d2[..., np.arange(n), np.arange(n)] = np.inf
    return r_ij, d2


def collided(positions):
    """Per-swarm flag: some pair closer than the singular distance."""
    _, d2 = _pairwise(np.asarray(positions, dtype=np.float64))
    return d2.min(axis=(-1, -2)) < SINGULAR_DISTANCE ** 2


def expert_action(state, cfg):
    """Centralized flocking controller (unclipped), using every agent's state."""
    if np.any(collided(state.positions)):
        raise CollisionError("coincident agents")
    return _expert_core(state.positions, state.velocities, cfg)


def _expert_core(pos, vel, cfg):
    # coincident pairs contribute nothing here; callers flag them separately
    n = vel.shape[-2]
    consensus = -(n * vel - vel.sum(axis=-2, keepdims=True))
    r_ij, d2 = _pairwise(pos)
    close = (d2 <= cfg.R_CA ** 2) & (d2 >= SINGULAR_DISTANCE ** 2)
    safe = np.where(close, d2, 1.0)
    coef = np.where(close, -2.0 / safe ** 2 - 2.0 / safe, 0.0)
    grad = np.einsum("...ij,...ijd->...id", coef, r_ij)
    return consensus - grad


def compute_state_features(state, S):
    """Six local features per agent from one-hop relative velocities/positions."""
    pos, vel = state.positions, state.velocities
    S = np.asarray(S, dtype=np.float64)
    r_ij, d2 = _pairwise(pos)
    linked = S > 0
    if np.any(linked & (d2 < SINGULAR_DISTANCE ** 2)):
        raise CollisionError("coincident neighbours")
    safe = np.where(linked, d2, 1.0)
    dv = S.sum(axis=-1)[..., None] * vel - S @ vel
    w4 = np.where(linked, S / safe ** 2, 0.0)
    w2 = np.where(linked, S / safe, 0.0)
    f4 = np.einsum("...ij,...ijd->...id", w4, r_ij)
    f2 = np.einsum("...ij,...ijd->...id", w2, r_ij)
    return np.concatenate([dv, f4, f2], axis=-1)


def velocity_variation_cost(velocities):
    """Mean squared deviation of agent velocities from the team mean."""
    v = np.asarray(velocities, dtype=np.float64)
    dev = v - v.mean(axis=-2, keepdims=True)
    return np.einsum("...nd,...nd->...", dev, dev) / v.shape[-2]


class ExpertPolicy:
    def reset(self, batch_shape, N):
        pass

    def __call__(self, state, S, X, cfg):
        return _expert_core(state.positions, state.velocities, cfg)


class ZeroPolicy:
    def reset(self, batch_shape, N):
        pass

    def __call__(self, state, S, X, cfg):
        return np.zeros_like(state.velocities)


class GNNPolicy:
    """Runs a trained GF/GCNN/GRNN, keeping the delayed histories locally."""

    def __init__(self, params):
        self.params = params
        self.hyper = params.hyper

    def reset(self, batch_shape, N):
        self.x_hist = GraphHistory(self.hyper.K + 1)
        if self.hyper.arch_kind == "GRNN":
            self.hidden = HiddenState.initial(self.hyper, batch_shape, N)

    def __call__(self, state, S, X, cfg):
        self.x_hist.push(S, X)
        if self.hyper.arch_kind == "GRNN":
            self.hidden, U = grnn_step(self.params, self.x_hist, self.hidden)
            return U
        return gcnn_forward(self.params, self.x_hist)


@dataclass
class Trajectory:
    """Recorded rollout of ``B`` swarms over ``T`` steps.

    Per-step arrays are indexed ``[b, t]``. ``S`` is stored as booleans.
    ``failed[b]`` marks a collision, first seen at ``failure_time[b]``; such a
    swarm is frozen from then on and its remaining costs repeat the last value.
    """

    positions: np.ndarray
    velocities: np.ndarray
    S: np.ndarray
    X: np.ndarray
    U: np.ndarray
    cost: np.ndarray
    failed: np.ndarray
    failure_time: np.ndarray

    @property
    def cumulative_cost(self):
        return self.cost.sum(axis=1)

    @property
    def terminal_cost(self):
        return self.cost[:, -1]

    def __len__(self):
        return self.cost.shape[0]

    def select(self, idx):
        return Trajectory(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def rollout(policy, init, cfg, record=True):
    """Closed-loop simulation of a batch of swarms.

    ``init`` holds ``(B, N, 2)`` (or unbatched ``(N, 2)``) arrays. Each step
    rebuilds the disk graph, computes features, queries the policy, clips and
    integrates. With ``record=False`` only costs and failure flags are kept.
    """
    single = init.positions.ndim == 2
    if single:
        init = SwarmState(init.positions[None], init.velocities[None], init.time_index)
    B, N = init.positions.shape[:2]
    T = cfg.T
    state = SwarmState(init.positions.copy(), init.velocities.copy(), 0)
    policy.reset((B,), N)
    cost = np.empty((B, T))
    failed = np.zeros(B, dtype=bool)
    failure_time = np.full(B, -1)
    if record:
        rec = {
            "positions": np.empty((B, T, N, 2)), "velocities": np.empty((B, T, N, 2)),
            "S": np.empty((B, T, N, N), dtype=bool), "X": np.empty((B, T, N, 6)),
            "U": np.empty((B, T, N, 2)),
        }
    for t in range(T):
        hit = collided(state.positions) & ~failed
        if np.any(hit):
            failed |= hit
            failure_time[hit] = t
        S = build_disk_graph(state.positions, cfg.R)
        X = compute_state_features_safe(state, S)
        if np.any(failed):
            X[failed] = 0.0
        U = policy(state, S, X, cfg) if not np.all(failed) else np.zeros_like(state.velocities)
        U = clip_acceleration(np.where(failed[:, None, None], 0.0, U), cfg.u_max, cfg.clip_mode)
        cost[:, t] = velocity_variation_cost(state.velocities)
        if record:
            rec["positions"][:, t] = state.positions
            rec["velocities"][:, t] = state.velocities
            rec["S"][:, t] = S > 0
            rec["X"][:, t] = X
            rec["U"][:, t] = U
        nxt = step_dynamics(state, U, cfg)
        keep = failed[:, None, None]
        state = SwarmState(np.where(keep, state.positions, nxt.positions),
                           np.where(keep, state.velocities, nxt.velocities), nxt.time_index)
    if not record:
        empty = np.empty((B, 0))
        rec = {k: empty for k in ("positions", "velocities", "S", "X", "U")}
    traj = Trajectory(rec["positions"], rec["velocities"], rec["S"], rec["X"], rec["U"],
                      cost, failed, failure_time)
    return traj


def compute_state_features_safe(state, S):
    """``compute_state_features`` that zeroes coincident pairs instead of raising."""
    pos = state.positions
    _, d2 = _pairwise(pos)
    bad = d2 < SINGULAR_DISTANCE ** 2
    if np.any(bad):
        S = np.where(bad, 0.0, S)
    return compute_state_features(state, S)
