"""Small MLP Q-network, RMSprop, replay buffer and the Double-DQN update.

Parameters are held as ``[W1, b1, W2, b2, W3, b3]`` with row-vector
convention ``h = relu(x @ W + b)``.  The fused update kernel has a numba and
a numpy implementation; :mod:`karma_mfg._backend` picks one.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from karma_mfg._backend import njit, pick
from karma_mfg.game import AgentState, GameConfig, deterministic_policy

HIDDEN = 64


# ---------------------------------------------------------------- kernels

def _encode_np(u, k, n_u, karma_cap):
    x = np.zeros((u.shape[0], n_u + 1))
    x[np.arange(u.shape[0]), u] = 1.0
    x[:, n_u] = k / karma_cap
    return x


def _forward_np(W1, b1, W2, b2, W3, b3, x):
    h1 = np.maximum(x @ W1 + b1, 0.0)
    h2 = np.maximum(h1 @ W2 + b2, 0.0)
    return h2 @ W3 + b3


def _masked_argmax_np(q, k):
    idx = np.arange(q.shape[1])
    masked = np.where(idx[None, :] <= k[:, None], q, -np.inf)
    return np.argmax(masked, axis=1)


def _loss_grads_np(W1, b1, W2, b2, W3, b3, x, a, y):
    n = x.shape[0]
    z1 = x @ W1 + b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ W2 + b2
    h2 = np.maximum(z2, 0.0)
    q = h2 @ W3 + b3
    rows = np.arange(n)
    diff = q[rows, a] - y
    loss = np.mean(diff * diff)
    dq = np.zeros_like(q)
    dq[rows, a] = 2.0 * diff / n
    gW3 = h2.T @ dq
    gb3 = dq.sum(axis=0)
    dz2 = (dq @ W3.T) * (z2 > 0.0)
    gW2 = h1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dz1 = (dz2 @ W2.T) * (z1 > 0.0)
    gW1 = x.T @ dz1
    gb1 = dz1.sum(axis=0)
    return loss, (gW1, gb1, gW2, gb2, gW3, gb3)


def _dqn_update_np(params, target, acc, u, k, a, r, u2, k2, n_u, karma_cap, alpha, lr, rho, eps):
    x2 = _encode_np(u2, k2, n_u, karma_cap)
    a_star = _masked_argmax_np(_forward_np(*params, x2), k2)
    q_next = _forward_np(*target, x2)
    y = r + alpha * q_next[np.arange(len(a_star)), a_star]
    x = _encode_np(u, k, n_u, karma_cap)
    loss, grads = _loss_grads_np(*params, x, a, y)
    for p, g, s in zip(params, grads, acc):
        s *= rho
        s += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(s) + eps)
    return loss


@njit
def _encode_nb(u, k, n_u, karma_cap):
    n = u.shape[0]
    x = np.zeros((n, n_u + 1))
    for i in range(n):
        x[i, u[i]] = 1.0
        x[i, n_u] = k[i] / karma_cap
    return x


@njit
def _dense_relu_nb(x, W, b):
    z = np.dot(x, W)
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            z[i, j] += b[j]
    return z


@njit
def _forward_nb(W1, b1, W2, b2, W3, b3, x):
    h1 = np.maximum(_dense_relu_nb(x, W1, b1), 0.0)
    h2 = np.maximum(_dense_relu_nb(h1, W2, b2), 0.0)
    return _dense_relu_nb(h2, W3, b3)


@njit
def _masked_argmax_nb(q, k):
    out = np.empty(q.shape[0], dtype=np.int64)
    for i in range(q.shape[0]):
        best = 0
        for j in range(1, k[i] + 1):
            if q[i, j] > q[i, best]:
                best = j
        out[i] = best
    return out


@njit
def _loss_grads_nb(W1, b1, W2, b2, W3, b3, x, a, y):
    n = x.shape[0]
    n_h2, n_out = W3.shape
    z1 = _dense_relu_nb(x, W1, b1)
    h1 = np.maximum(z1, 0.0)
    z2 = _dense_relu_nb(h1, W2, b2)
    h2 = np.maximum(z2, 0.0)
    gW3 = np.zeros_like(W3)
    gb3 = np.zeros_like(b3)
    dz2 = np.empty_like(z2)
    loss = 0.0
    for i in range(n):
        ai = a[i]
        pred = b3[ai]
        for j in range(n_h2):
            pred += h2[i, j] * W3[j, ai]
        diff = pred - y[i]
        loss += diff * diff
        d = 2.0 * diff / n
        gb3[ai] += d
        for j in range(n_h2):
            gW3[j, ai] += h2[i, j] * d
            dz2[i, j] = d * W3[j, ai] if z2[i, j] > 0.0 else 0.0
    gW2 = np.dot(h1.T, dz2)
    gb2 = dz2.sum(axis=0)
    dz1 = np.dot(dz2, W2.T)
    for i in range(n):
        for j in range(dz1.shape[1]):
            if z1[i, j] <= 0.0:
                dz1[i, j] = 0.0
    gW1 = np.dot(x.T, dz1)
    gb1 = dz1.sum(axis=0)
    return loss / n, (gW1, gb1, gW2, gb2, gW3, gb3)


@njit
def _rms_step_nb(p, g, s, lr, rho, eps):
    pf = p.ravel()
    gf = g.ravel()
    sf = s.ravel()
    for i in range(pf.shape[0]):
        sf[i] = rho * sf[i] + (1.0 - rho) * gf[i] * gf[i]
        pf[i] -= lr * gf[i] / (math.sqrt(sf[i]) + eps)


@njit
def _dqn_update_nb(W1, b1, W2, b2, W3, b3, T1, c1, T2, c2, T3, c3,
                   s1, sb1, s2, sb2, s3, sb3, u, k, a, r, u2, k2, n_u, karma_cap, alpha, lr, rho, eps):
    x2 = _encode_nb(u2, k2, n_u, karma_cap)
    a_star = _masked_argmax_nb(_forward_nb(W1, b1, W2, b2, W3, b3, x2), k2)
    q_next = _forward_nb(T1, c1, T2, c2, T3, c3, x2)
    n = u.shape[0]
    y = np.empty(n)
    for i in range(n):
        y[i] = r[i] + alpha * q_next[i, a_star[i]]
    x = _encode_nb(u, k, n_u, karma_cap)
    loss, g = _loss_grads_nb(W1, b1, W2, b2, W3, b3, x, a, y)
    _rms_step_nb(W1, g[0], s1, lr, rho, eps)
    _rms_step_nb(b1, g[1], sb1, lr, rho, eps)
    _rms_step_nb(W2, g[2], s2, lr, rho, eps)
    _rms_step_nb(b2, g[3], sb2, lr, rho, eps)
    _rms_step_nb(W3, g[4], s3, lr, rho, eps)
    _rms_step_nb(b3, g[5], sb3, lr, rho, eps)
    return loss


def _dqn_update_nb_wrap(params, target, acc, u, k, a, r, u2, k2, n_u, karma_cap, alpha, lr, rho, eps):
    return _dqn_update_nb(*params, *target, *acc, u, k, a, r, u2, k2, n_u, float(karma_cap), alpha, lr, rho, eps)


def _loss_grads_nb_wrap(*args):
    return _loss_grads_nb(*args)


forward_kernel = pick(_forward_nb, _forward_np)
loss_grads_kernel = pick(_loss_grads_nb_wrap, _loss_grads_np)
dqn_update_kernel = pick(_dqn_update_nb_wrap, _dqn_update_np)


# ---------------------------------------------------------------- network

class QNetwork:
    """MLP ``n_in -> 64 -> 64 -> n_out`` with ReLU hidden layers."""

    def __init__(self, params: list[np.ndarray]):
        self.params = [np.ascontiguousarray(p, dtype=np.float64) for p in params]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, hidden: int = HIDDEN) -> "QNetwork":
        """Fan-balanced uniform weights, zero biases."""
        dims = [n_in, hidden, hidden, n_out]
        params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return cls(params)

    @classmethod
    def zeros(cls, n_in: int, n_out: int, hidden: int = HIDDEN) -> "QNetwork":
        dims = [n_in, hidden, hidden, n_out]
        params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            params += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
        return cls(params)

    @property
    def dims(self) -> list[int]:
        return [self.params[0].shape[0]] + [w.shape[1] for w in self.params[0::2]]

    def forward(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f"expected {self.dims[0]} features, got {x.shape[-1]}")
        if x.ndim == 1:
            return forward_kernel(*self.params, x[None, :])[0]
        return forward_kernel(*self.params, np.ascontiguousarray(x))

    __call__ = forward

    def copy(self) -> "QNetwork":
        return QNetwork([p.copy() for p in self.params])

    def load_from(self, other: "QNetwork"):
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def save(self, path, extra: dict | None = None):
        """Write ``<path>.bin`` (int64 dim header, float64 weights, little
        endian) and the ``<path>.json`` manifest."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".json")
        dims = self.dims
        with open(bin_path, "wb") as fh:
            fh.write(np.array([len(dims)] + dims, dtype="<i8").tobytes())
            fh.write(self.flat().astype("<f8").tobytes())
        manifest = {
            "format": "karma-mfg-qnetwork",
            "version": 1,
            "dims": dims,
            "activation": "relu",
            "layout": "W1[in,h1] b1 W2[h1,h2] b2 W3[h2,out] b3, row-major",
            "weights": bin_path.name,
        }
        if extra:
            manifest.update(extra)
        man_path.write_text(json.dumps(manifest, indent=2) + "\n")
        return man_path

    @classmethod
    def load(cls, path) -> "QNetwork":
        path = Path(path)
        man_path = path.with_suffix(".json")
        bin_path = path.with_suffix(".bin")
        if man_path.exists():
            bin_path = man_path.parent / json.loads(man_path.read_text())["weights"]
        raw = bin_path.read_bytes()
        n_dims = int(np.frombuffer(raw[:8], dtype="<i8")[0])
        dims = np.frombuffer(raw[8: 8 + 8 * n_dims], dtype="<i8").tolist()
        flat = np.frombuffer(raw[8 + 8 * n_dims:], dtype="<f8").astype(np.float64)
        params, pos = [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            params.append(flat[pos: pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            params.append(flat[pos: pos + fan_out].copy())
            pos += fan_out
        if pos != flat.size:
            raise ValueError("weight file size does not match its header")
        return cls(params)


def encode_state(state: AgentState, cfg: GameConfig) -> np.ndarray:
    """One-hot urgency followed by ``k / K``."""
    x = np.zeros(cfg.n_urgency + 1)
    x[state.urgency_index] = 1.0
    x[-1] = state.karma / cfg.karma_cap
    return x


def encode_states(u: np.ndarray, k: np.ndarray, cfg: GameConfig) -> np.ndarray:
    return _encode_np(np.asarray(u, dtype=np.int64), np.asarray(k, dtype=np.float64), cfg.n_urgency, cfg.karma_cap)


def masked_greedy(q: np.ndarray, k: int) -> int:
    """Argmax over bids ``0..k``; lowest bid on ties."""
    return int(np.argmax(q[: k + 1]))


def epsilon_greedy(q: np.ndarray, k: int, eps: float, rng: np.random.Generator) -> int:
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if rng.random() < eps:
        return int(rng.integers(0, k + 1))
    return masked_greedy(q, k)


def extract_greedy_policy(net: QNetwork, cfg: GameConfig) -> np.ndarray:
    """Point-mass policy tensor ``pi[u, k, a]`` of the masked greedy bids."""
    u, k = np.meshgrid(np.arange(cfg.n_urgency), np.arange(cfg.n_karma), indexing="ij")
    q = net.forward(encode_states(u.ravel(), k.ravel(), cfg))
    bids = _masked_argmax_np(q, k.ravel()).reshape(cfg.n_urgency, cfg.n_karma)
    return deterministic_policy(bids, cfg.n_karma)


# ---------------------------------------------------------------- training

@dataclass
class EpsilonSchedule:
    eps0: float = 1.0
    eps_min: float = 0.01
    horizon: int = 1_000_000

    @property
    def factor(self) -> float:
        return (self.eps_min / self.eps0) ** (1.0 / self.horizon)

    def __call__(self, t: int) -> float:
        return max(self.eps_min, self.eps0 * self.factor ** t)


@dataclass
class DqnConfig:
    buffer_size: int = 1_000_000
    batch_size: int = 128
    target_sync_period: int = 1000
    total_steps: int = 1_000_000
    learning_rate: float = 3e-4
    discount: float = 0.98
    warmup_steps: int | None = None
    eval_period: int = 10_000
    eval_episodes: int = 10
    episode_length: int = 1000
    eps0: float = 1.0
    eps_min: float = 0.01
    eps_horizon: int = 1_000_000
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    hidden: int = HIDDEN

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = self.batch_size
        if self.batch_size > self.buffer_size:
            raise ValueError("batch_size must not exceed buffer_size")
        for name in ("buffer_size", "batch_size", "target_sync_period", "total_steps",
                     "eval_period", "eval_episodes", "episode_length", "eps_horizon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def epsilon(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps0, self.eps_min, self.eps_horizon)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RmspropState:
    accumulators: list
    learning_rate: float = 3e-4
    decay: float = 0.99
    epsilon: float = 1e-8

    @classmethod
    def for_network(cls, net: QNetwork, learning_rate=3e-4, decay=0.99, epsilon=1e-8) -> "RmspropState":
        return cls([np.zeros_like(p) for p in net.params], learning_rate, decay, epsilon)


class ReplayBuffer:
    """Fixed-capacity ring of ``(u, k, a, r, u', k')`` transitions."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.u = np.zeros(capacity, dtype=np.int64)
        self.k = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.u2 = np.zeros(capacity, dtype=np.int64)
        self.k2 = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.fill = 0

    def __len__(self):
        return self.fill

    def push(self, state: AgentState, action: int, reward: float, next_state: AgentState):
        i = self.cursor
        self.u[i], self.k[i] = state
        self.a[i] = action
        self.r[i] = reward
        self.u2[i], self.k2[i] = next_state
        self.cursor = (i + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)

    def clear(self):
        self.cursor = 0
        self.fill = 0

    def sample_indices(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return rng.integers(0, self.fill, size=batch_size)

    def batch(self, idx: np.ndarray) -> tuple:
        return self.u[idx], self.k[idx], self.a[idx], self.r[idx], self.u2[idx], self.k2[idx]

    def transitions(self) -> list[tuple]:
        """Stored transitions, oldest first."""
        order = np.arange(self.cursor - self.fill, self.cursor) % self.capacity
        return [(AgentState(int(self.u[i]), int(self.k[i])), int(self.a[i]), float(self.r[i]),
                 AgentState(int(self.u2[i]), int(self.k2[i]))) for i in order]


def double_dqn_target(batch: tuple, online: QNetwork, target: QNetwork, alpha: float, cfg: GameConfig) -> np.ndarray:
    """``r + alpha * Q_target(x', argmax_{a' <= k'} Q_online(x', a'))``.

    No terminal cut: episodes are truncations of a continuing task.
    """
    _, _, _, r, u2, k2 = batch
    x2 = encode_states(u2, k2, cfg)
    a_star = _masked_argmax_np(online.forward(x2), np.asarray(k2))
    q_next = target.forward(x2)
    return np.asarray(r, dtype=np.float64) + alpha * q_next[np.arange(len(a_star)), a_star]


def loss_and_grads(net: QNetwork, x: np.ndarray, a: np.ndarray, y: np.ndarray):
    """Mean squared error of the taken-action outputs against fixed targets,
    and its gradient with respect to every parameter."""
    return loss_grads_kernel(*net.params, np.ascontiguousarray(x, dtype=np.float64),
                             np.asarray(a, dtype=np.int64), np.asarray(y, dtype=np.float64))


class DqnAgent:
    """Online/target networks, optimizer state and replay for one learner."""

    def __init__(self, cfg: GameConfig, dqn: DqnConfig, rng: np.random.Generator):
        self.game = cfg
        self.cfg = dqn
        self.rng = rng
        self.online = QNetwork.init(cfg.n_urgency + 1, cfg.n_karma, rng, dqn.hidden)
        self.target = self.online.copy()
        self.opt = RmspropState.for_network(self.online, dqn.learning_rate, dqn.rms_decay, dqn.rms_eps)
        self.buffer = ReplayBuffer(dqn.buffer_size)
        self.schedule = dqn.epsilon()
        self.env_steps = 0
        self.grad_steps = 0

    def reset_learner(self, fresh_buffer: bool = True):
        """Fresh weights and optimizer state; optionally keep the replay."""
        self.online = QNetwork.init(self.game.n_urgency + 1, self.game.n_karma, self.rng, self.cfg.hidden)
        self.target = self.online.copy()
        self.opt = RmspropState.for_network(self.online, self.cfg.learning_rate, self.cfg.rms_decay, self.cfg.rms_eps)
        if fresh_buffer:
            self.buffer.clear()
        self.env_steps = 0
        self.grad_steps = 0

    def q_values(self, state: AgentState) -> np.ndarray:
        return self.online.forward(encode_state(state, self.game))

    def act(self, state: AgentState, eps: float | None = None) -> int:
        if eps is None:
            eps = self.schedule(self.env_steps)
        if self.rng.random() < eps:
            return int(self.rng.integers(0, state.karma + 1))
        return masked_greedy(self.q_values(state), state.karma)

    def observe(self, state: AgentState, action: int, reward: float, next_state: AgentState) -> float | None:
        """Store a transition and take one gradient step once warm."""
        self.buffer.push(state, action, reward, next_state)
        self.env_steps += 1
        if len(self.buffer) < max(self.cfg.warmup_steps, self.cfg.batch_size):
            return None
        idx = self.buffer.sample_indices(self.rng, self.cfg.batch_size)
        return train_step(self, self.buffer.batch(idx))

    def greedy_policy(self) -> np.ndarray:
        return extract_greedy_policy(self.online, self.game)


def train_step(agent: DqnAgent, batch: tuple) -> float:
    """One RMSprop step on the Double-DQN regression loss; returns the
    pre-step batch loss.  Syncs the target network on schedule."""
    u, k, a, r, u2, k2 = (np.ascontiguousarray(b) for b in batch)
    opt = agent.opt
    loss = dqn_update_kernel(agent.online.params, agent.target.params, opt.accumulators,
                             u.astype(np.int64), k.astype(np.int64), a.astype(np.int64), r.astype(np.float64),
                             u2.astype(np.int64), k2.astype(np.int64), agent.game.n_urgency, agent.game.karma_cap,
                             agent.cfg.discount, opt.learning_rate, opt.decay, opt.epsilon)
    agent.grad_steps += 1
    if agent.grad_steps % agent.cfg.target_sync_period == 0:
        agent.target.load_from(agent.online)
    return float(loss)
