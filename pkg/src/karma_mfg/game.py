"""Karma economy primitives: states, bids, outcomes, rewards and the
pay-bid-to-society karma kernel."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

SUM_TOL = 1e-12
INTEGER_SNAP = 1e-9


class ContractError(ValueError):
    """Raised when an operation is called outside its precondition."""


def chain_stationary(P: np.ndarray, tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary law of a row-stochastic matrix by lazy power iteration.

    The lazy chain ``(I + P) / 2`` shares the stationary law of ``P`` and is
    aperiodic, so periodic chains (e.g. a two-state swap) still converge.
    """
    n = P.shape[0]
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = 0.5 * (x + x @ P)
        nxt /= nxt.sum()
        if np.abs(nxt - x).sum() <= tol:
            return nxt
        x = nxt
    raise RuntimeError(f"power iteration did not converge (last L1 change {np.abs(nxt - x).sum():.3e})")


@dataclass
class GameConfig:
    urgency_values: np.ndarray
    urgency_chain: np.ndarray
    karma_cap: int
    avg_karma: int
    discount: float

    def __post_init__(self):
        self.urgency_values = np.asarray(self.urgency_values, dtype=np.float64)
        self.urgency_chain = np.asarray(self.urgency_chain, dtype=np.float64)
        self.karma_cap = int(self.karma_cap)
        self.avg_karma = int(self.avg_karma)
        self.discount = float(self.discount)
        self.validate()

    def validate(self):
        nu = self.urgency_values.shape[0]
        phi = self.urgency_chain
        if self.urgency_values.ndim != 1 or nu == 0:
            raise ContractError("urgency_values must be a non-empty vector")
        if phi.shape != (nu, nu):
            raise ContractError(f"urgency_chain must be {nu}x{nu}, got {phi.shape}")
        if np.any(phi < 0) or np.any(np.abs(phi.sum(axis=1) - 1.0) > SUM_TOL):
            raise ContractError("urgency_chain must be row-stochastic")
        if self.karma_cap < 1:
            raise ContractError("karma_cap must be >= 1")
        if not 0 < self.avg_karma <= self.karma_cap:
            raise ContractError("avg_karma must satisfy 0 < avg_karma <= karma_cap")
        if not 0.0 <= self.discount < 1.0:
            raise ContractError("discount must lie in [0, 1)")
        reach = (phi > 0) | np.eye(nu, dtype=bool)
        for _ in range(nu):
            reach = (reach.astype(np.int64) @ reach.astype(np.int64)) > 0
        if not reach.all() or np.any(chain_stationary(phi) <= 0):
            raise ContractError("urgency_chain is not irreducible")

    @property
    def n_urgency(self) -> int:
        return self.urgency_values.shape[0]

    @property
    def n_karma(self) -> int:
        return self.karma_cap + 1

    @property
    def n_states(self) -> int:
        return self.n_urgency * self.n_karma

    @property
    def max_reward(self) -> float:
        return float(np.max(np.abs(self.urgency_values)))

    def urgency_stationary(self) -> np.ndarray:
        return chain_stationary(self.urgency_chain)

    def feasible_mask(self) -> np.ndarray:
        """Boolean ``[k, a]`` table, true where ``a <= k``."""
        idx = np.arange(self.n_karma)
        return idx[None, :] <= idx[:, None]

    def to_dict(self) -> dict:
        return {
            "urgency_values": self.urgency_values.tolist(),
            "urgency_chain": self.urgency_chain.tolist(),
            "karma_cap": self.karma_cap,
            "avg_karma": self.avg_karma,
            "discount": self.discount,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GameConfig":
        return cls(d["urgency_values"], d["urgency_chain"], d["karma_cap"], d["avg_karma"], d["discount"])

    @classmethod
    def from_json(cls, path) -> "GameConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def load_instance(name: str) -> GameConfig:
    """Load a bundled instance by name (``instance-2u``, ``instance-3u``,
    ``instance-2u-k12``)."""
    if not name.endswith(".json"):
        name += ".json"
    ref = resources.files("karma_mfg") / "instances" / name
    return GameConfig.from_dict(json.loads(ref.read_text()))


class AgentState(NamedTuple):
    urgency_index: int
    karma: int


@dataclass
class MeanField:
    """Population state law ``mu[u, k]`` and bid policy ``pi[u, k, a]``."""

    mu: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)

    def validate(self, tol: float = SUM_TOL):
        mu, pi = self.mu, self.pi
        if mu.ndim != 2 or pi.shape != mu.shape + (mu.shape[1],):
            raise ContractError(f"shape mismatch: mu {mu.shape}, pi {pi.shape}")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > tol:
            raise ContractError("mu must lie on the simplex")
        validate_policy(pi, tol)
        return self

    def copy(self) -> "MeanField":
        return MeanField(self.mu.copy(), self.pi.copy())


def validate_policy(pi: np.ndarray, tol: float = SUM_TOL):
    n_k = pi.shape[1]
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=2) - 1.0) > tol):
        raise ContractError("policy rows must lie on the simplex")
    infeasible = ~(np.arange(n_k)[None, :] <= np.arange(n_k)[:, None])
    if np.any(pi[:, infeasible] != 0.0):
        raise ContractError("policy puts mass on bids above the karma balance")


def uniform_policy(n_urgency: int, n_karma: int) -> np.ndarray:
    idx = np.arange(n_karma)
    feas = (idx[None, :] <= idx[:, None]).astype(np.float64)
    pi = feas / feas.sum(axis=1, keepdims=True)
    return np.broadcast_to(pi, (n_urgency, n_karma, n_karma)).copy()


def deterministic_policy(bids: np.ndarray, n_karma: int) -> np.ndarray:
    """Point-mass policy tensor from an integer ``[u, k]`` bid table."""
    bids = np.asarray(bids, dtype=np.int64)
    pi = np.zeros(bids.shape + (n_karma,))
    np.put_along_axis(pi, bids[..., None], 1.0, axis=-1)
    return pi


def opponent_bid_distribution(mf: MeanField) -> np.ndarray:
    """Law of a randomly drawn opponent's bid."""
    nu = np.einsum("uk,uka->a", mf.mu, mf.pi)
    return nu / nu.sum()


def win_probabilities(nu: np.ndarray) -> np.ndarray:
    """Win probability of every bid against opponents drawn from ``nu``
    (strictly higher bid wins, ties are a fair coin)."""
    below = np.concatenate(([0.0], np.cumsum(nu)[:-1]))
    return below + 0.5 * nu


def win_probability(a: int, nu: np.ndarray) -> float:
    if not 0 <= a < len(nu):
        raise ContractError(f"bid {a} outside [0, {len(nu) - 1}]")
    return float(nu[:a].sum() + 0.5 * nu[a])


def _check_bid(k: int, a: int, n_karma: int):
    if not 0 <= k < n_karma:
        raise ContractError(f"karma {k} outside [0, {n_karma - 1}]")
    if not 0 <= a <= k:
        raise ContractError(f"infeasible bid {a} with karma {k}")


def reward(state: AgentState, a: int, mf: MeanField, cfg: GameConfig) -> float:
    u, k = state
    _check_bid(k, a, cfg.n_karma)
    return float(cfg.urgency_values[u] * win_probability(a, opponent_bid_distribution(mf)))


def reward_table(mf: MeanField, cfg: GameConfig) -> np.ndarray:
    """Expected immediate reward ``r[u, a]`` (independent of karma)."""
    pwin = win_probabilities(opponent_bid_distribution(mf))
    return cfg.urgency_values[:, None] * pwin[None, :]


def surplus(mf: MeanField) -> float:
    """Average karma paid into the pool per agent and step."""
    pwin = win_probabilities(opponent_bid_distribution(mf))
    bids = np.arange(mf.pi.shape[-1])
    per_state = mf.pi @ (pwin * bids)
    return float(np.sum(mf.mu * per_state))


def _snap(pbar: float) -> float:
    m = round(pbar)
    return float(m) if abs(pbar - m) <= INTEGER_SNAP else float(pbar)


def redistribution_fractions(pbar: float) -> tuple[float, float]:
    """Fractions of agents receiving ``floor(pbar)`` and ``ceil(pbar)``."""
    if pbar < 0:
        raise ContractError("surplus must be non-negative")
    pbar = _snap(pbar)
    f_low = math.ceil(pbar) - pbar
    return f_low, 1.0 - f_low


def _post_payment_mass(mf: MeanField, pwin: np.ndarray) -> np.ndarray:
    """Population mass over balances after bids are paid, before the grant."""
    n_k = mf.mu.shape[1]
    k = np.arange(n_k)
    w = np.zeros(n_k)
    joint = np.einsum("uk,uka->ka", mf.mu, mf.pi)
    for a in range(n_k):
        col = joint[a:, a]
        w[a:] += col * (1.0 - pwin[a])  # losers keep k
        w[: n_k - a] += col * pwin[a]  # winners drop to k - a
    return w


def effective_grant(mf: MeanField, karma_cap: int) -> float:
    """Mean grant handed to each agent so that the karma actually received,
    after saturation at the cap, equals the surplus.

    A unit that cannot be credited at the cap is passed on to agents with
    headroom, so the aggregate flow conserves karma.  Equal to the surplus
    whenever no grant can cross the cap.  If the whole population lacks
    headroom the grant saturates at ``karma_cap``.
    """
    pwin = win_probabilities(opponent_bid_distribution(mf))
    pbar = _snap(surplus(mf))
    w = _post_payment_mass(mf, pwin)
    headroom = karma_cap - np.arange(karma_cap + 1)

    def received(g):
        return float(np.sum(w * np.minimum(g, headroom)))

    if received(pbar) >= pbar - 1e-15:
        return pbar
    if received(float(karma_cap)) <= pbar:
        return float(karma_cap)
    lo, hi = pbar, float(karma_cap)
    # received() is piecewise linear with kinks at integers: bracket the
    # segment, then solve exactly.
    n_lo = math.floor(lo)
    while received(n_lo + 1) < pbar:
        n_lo += 1
    r0, r1 = received(n_lo), received(n_lo + 1)
    g = n_lo + (pbar - r0) / (r1 - r0) if r1 > r0 else float(n_lo)
    return _snap(min(max(g, lo), hi))


def karma_kernel_table(mf: MeanField, karma_cap: int) -> np.ndarray:
    """Dense kernel ``kappa[k, a, k_next]``; rows with ``a > k`` are zero.

    Next balances are clamped into ``[0, karma_cap]``; the grant level is
    :func:`effective_grant`, which equals the surplus unless clamping binds.
    """
    n_k = karma_cap + 1
    pwin = win_probabilities(opponent_bid_distribution(mf))
    grant = effective_grant(mf, karma_cap)
    f_low, f_high = redistribution_fractions(grant)
    lo, hi = math.floor(grant), math.ceil(grant)

    k = np.arange(n_k)[:, None]
    a = np.arange(n_k)[None, :]
    feas = a <= k
    kk, aa = np.broadcast_arrays(k, a)
    kk, aa = kk[feas], aa[feas]
    pw = pwin[aa]

    table = np.zeros((n_k, n_k, n_k))
    branches = (
        (kk - aa + lo, pw * f_low),
        (kk - aa + hi, pw * f_high),
        (kk + lo, (1.0 - pw) * f_low),
        (kk + hi, (1.0 - pw) * f_high),
    )
    for target, prob in branches:
        np.add.at(table, (kk, aa, np.clip(target, 0, karma_cap)), prob)
    return table


def karma_kernel(k: int, a: int, mf: MeanField) -> np.ndarray:
    n_k = mf.mu.shape[1]
    _check_bid(k, a, n_k)
    return karma_kernel_table(mf, n_k - 1)[k, a]


def state_transition(state: AgentState, a: int, mf: MeanField, cfg: GameConfig) -> np.ndarray:
    """Next-state law ``p[u_next, k_next]`` for one agent."""
    u, k = state
    _check_bid(k, a, cfg.n_karma)
    kappa = karma_kernel_table(mf, cfg.karma_cap)[k, a]
    return np.outer(cfg.urgency_chain[u], kappa)


def state_chain(mf: MeanField, cfg: GameConfig, kappa: np.ndarray | None = None) -> np.ndarray:
    """Transition matrix over flattened states ``x = u * (K+1) + k`` induced by
    the population policy with the kernel frozen at ``mf``."""
    if kappa is None:
        kappa = karma_kernel_table(mf, cfg.karma_cap)
    karma_step = np.einsum("uka,kaj->ukj", mf.pi, kappa)
    P = np.einsum("uv,ukj->ukvj", cfg.urgency_chain, karma_step)
    n = cfg.n_states
    return P.reshape(n, n)
