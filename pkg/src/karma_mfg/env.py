"""Environments for a single learning agent.

``MeanFieldEnv`` plays against a frozen mean field using the expected
reward; ``PopulationEnv`` simulates N concrete agents with pairwise
matching, pay-bid-to-society and exact integer karma conservation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from karma_mfg._backend import njit, pick
from karma_mfg.game import AgentState, ContractError, GameConfig, MeanField, karma_kernel_table, reward_table


def _cumulative(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return c


def _draw(cum_row: np.ndarray, u: float) -> int:
    return int(np.searchsorted(cum_row, u, side="right"))


def sample_states(mu: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` i.i.d. ``(urgency, karma)`` draws from ``mu[u, k]``."""
    flat = _cumulative(mu.reshape(-1))
    idx = np.minimum(np.searchsorted(flat, rng.random(n), side="right"), flat.size - 1)
    return idx // mu.shape[1], idx % mu.shape[1]


@dataclass
class EpisodeConfig:
    episode_length: int = 1000
    learner_init: str = "mu"  # resample the learner from the reset law each episode
    population_init: str = "mu"

    def __post_init__(self):
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")


# ---------------------------------------------------------------- mean-field mode

class MeanFieldEnv:
    """Single agent against a frozen mean field."""

    def __init__(self, game: GameConfig, mf: MeanField, rng: np.random.Generator, init_mu: np.ndarray | None = None):
        self.game = game
        self.mf = mf
        self.rng = rng
        self.rewards = reward_table(mf, game)
        self.kappa = karma_kernel_table(mf, game.karma_cap)
        self.cum_kappa = _cumulative(self.kappa)
        self.cum_phi = _cumulative(game.urgency_chain)
        self.init_mu = mf.mu if init_mu is None else np.asarray(init_mu)
        self.agent_state = AgentState(0, game.avg_karma)
        self.step_counter = 0

    def reset(self, init_mu: np.ndarray | None = None, rng: np.random.Generator | None = None) -> AgentState:
        rng = rng or self.rng
        mu = self.init_mu if init_mu is None else np.asarray(init_mu)
        u, k = sample_states(mu, 1, rng)
        self.agent_state = AgentState(int(u[0]), int(k[0]))
        return self.agent_state

    def step(self, a: int) -> tuple[float, AgentState]:
        u, k = self.agent_state
        if not 0 <= a <= k:
            raise ContractError(f"infeasible bid {a} with karma {k}")
        r = float(self.rewards[u, a])
        u2 = _draw(self.cum_phi[u], self.rng.random())
        k2 = _draw(self.cum_kappa[k, a], self.rng.random())
        self.agent_state = AgentState(u2, min(k2, self.game.karma_cap))
        self.step_counter += 1
        return r, self.agent_state


def _rollout_py(cum_pi, rewards, cum_phi, cum_kappa, u, k, unif):
    total = 0.0
    n_k = cum_pi.shape[2]
    for t in range(unif.shape[0]):
        a = min(int(np.searchsorted(cum_pi[u, k], unif[t, 0], side="right")), k)
        total += rewards[u, a]
        u2 = min(int(np.searchsorted(cum_phi[u], unif[t, 1], side="right")), cum_phi.shape[0] - 1)
        k = min(int(np.searchsorted(cum_kappa[k, a], unif[t, 2], side="right")), n_k - 1)
        u = u2
    return total


@njit
def _search(row, x, hi):
    i = 0
    while i < hi and row[i] <= x:
        i += 1
    return i


@njit
def _rollout_nb(cum_pi, rewards, cum_phi, cum_kappa, u, k, unif):
    total = 0.0
    n_u = cum_phi.shape[0]
    n_k = cum_pi.shape[2]
    for t in range(unif.shape[0]):
        a = _search(cum_pi[u, k], unif[t, 0], k)
        total += rewards[u, a]
        u2 = _search(cum_phi[u], unif[t, 1], n_u - 1)
        k = _search(cum_kappa[k, a], unif[t, 2], n_k - 1)
        u = u2
    return total


rollout_kernel = pick(_rollout_nb, _rollout_py)


def mf_episode_return(env: MeanFieldEnv, policy: np.ndarray, start: AgentState, unif: np.ndarray) -> float:
    """Undiscounted return of ``policy`` from ``start`` driven by the uniform
    draws ``unif[t] = (bid, urgency, karma)``."""
    cum_pi = _cumulative(policy)
    return float(rollout_kernel(cum_pi, env.rewards, env.cum_phi, env.cum_kappa, int(start[0]), int(start[1]),
                                np.ascontiguousarray(unif)))


# ---------------------------------------------------------------- population mode

def _sample_bids_np(cum_pi, urg, karma, unif):
    rows = cum_pi[urg, karma]
    bids = (rows <= unif[:, None]).sum(axis=1)
    return np.minimum(bids, karma)


@njit
def _sample_bids_nb(cum_pi, urg, karma, unif):
    out = np.empty(urg.shape[0], dtype=np.int64)
    for i in range(urg.shape[0]):
        out[i] = _search(cum_pi[urg[i], karma[i]], unif[i], karma[i])
    return out


def _compete_np(perm, bids, coins, karma, outcome):
    m = perm.shape[0] // 2
    left, right = perm[0:2 * m:2], perm[1:2 * m:2]
    bl, br = bids[left], bids[right]
    left_wins = (bl > br) | ((bl == br) & (coins[:m] < 0.5))
    winners = np.where(left_wins, left, right)
    losers = np.where(left_wins, right, left)
    outcome[:] = -1
    outcome[winners] = 1
    outcome[losers] = 0
    paid = bids[winners]
    karma[winners] -= paid
    return int(paid.sum())


@njit
def _compete_nb(perm, bids, coins, karma, outcome):
    for i in range(outcome.shape[0]):
        outcome[i] = -1
    pool = 0
    for p in range(perm.shape[0] // 2):
        i = perm[2 * p]
        j = perm[2 * p + 1]
        if bids[i] > bids[j] or (bids[i] == bids[j] and coins[p] < 0.5):
            w, l = i, j
        else:
            w, l = j, i
        outcome[w] = 1
        outcome[l] = 0
        karma[w] -= bids[w]
        pool += bids[w]
    return pool


def _grant_np(karma, share, extra, cap):
    grant = np.full(karma.shape[0], share, dtype=np.int64)
    grant[extra] += 1
    credited = np.minimum(grant, cap - karma)
    karma += credited
    return int((grant - credited).sum())


@njit
def _grant_nb(karma, share, extra, cap):
    overflow = 0
    for i in range(karma.shape[0]):
        room = cap - karma[i]
        if share <= room:
            karma[i] += share
        else:
            karma[i] = cap
            overflow += share - room
    for j in range(extra.shape[0]):
        i = extra[j]
        if karma[i] < cap:
            karma[i] += 1
        else:
            overflow += 1
    return overflow


def _next_urgency_np(urg, cum_phi, unif):
    rows = cum_phi[urg]
    return np.minimum((rows <= unif[:, None]).sum(axis=1), cum_phi.shape[0] - 1)


@njit
def _next_urgency_nb(urg, cum_phi, unif):
    out = np.empty_like(urg)
    n_u = cum_phi.shape[0]
    for i in range(urg.shape[0]):
        out[i] = _search(cum_phi[urg[i]], unif[i], n_u - 1)
    return out


sample_bids_kernel = pick(_sample_bids_nb, _sample_bids_np)
compete_kernel = pick(_compete_nb, _compete_np)
grant_kernel = pick(_grant_nb, _grant_np)
next_urgency_kernel = pick(_next_urgency_nb, _next_urgency_np)


class PopulationEnv:
    """N agents playing a fixed policy, plus an optional learner at index N.

    One step: random pairwise matching (one agent sits out if the count is
    odd), higher bid wins with a fair coin on ties, winners pay into a pool,
    the pool is split as ``floor(pool / M)`` each plus one extra unit for
    ``pool mod M`` distinct random agents, then urgencies move.  A unit that
    would lift an agent above the cap goes to a random agent with headroom;
    if nobody has headroom it is destroyed and ``conservation_warnings``
    counts it.
    """

    def __init__(self, game: GameConfig, population_policy: np.ndarray, n_agents: int, rng: np.random.Generator,
                 with_learner: bool = True, trace_path=None):
        if n_agents < 1:
            raise ValueError("population needs at least one agent")
        self.game = game
        self.n = n_agents
        self.with_learner = with_learner
        self.rng = rng
        self.m = n_agents + (1 if with_learner else 0)
        self.urg = np.zeros(self.m, dtype=np.int64)
        self.karma = np.full(self.m, game.avg_karma, dtype=np.int64)
        self.outcome = np.full(self.m, -1, dtype=np.int64)
        self.cum_phi = _cumulative(game.urgency_chain)
        self.set_policy(population_policy)
        self.total_karma = int(self.karma.sum())
        self.conservation_warnings = 0
        self.step_counter = 0
        self._trace = None
        if trace_path is not None:
            self._trace_fh = open(trace_path, "w", newline="")
            self._trace = csv.writer(self._trace_fh, lineterminator="\n")
            self._trace.writerow(["step", "learner_urgency", "learner_karma", "bid", "reward"])

    def set_policy(self, pi: np.ndarray):
        self.population_policy = np.asarray(pi, dtype=np.float64)
        self.cum_pi = _cumulative(self.population_policy)

    @property
    def learner(self) -> AgentState:
        if not self.with_learner:
            raise ContractError("environment has no learner")
        return AgentState(int(self.urg[-1]), int(self.karma[-1]))

    def reset(self, mf_init: MeanField, rng: np.random.Generator | None = None):
        """Draw every agent (learner included) independently from
        ``mf_init.mu`` and adopt ``mf_init.pi`` as the population policy."""
        if rng is not None:
            self.rng = rng
        self.urg, self.karma = sample_states(mf_init.mu, self.m, self.rng)
        self.urg = self.urg.astype(np.int64)
        self.karma = self.karma.astype(np.int64)
        self.set_policy(mf_init.pi)
        self.total_karma = int(self.karma.sum())
        self.step_counter = 0

    def step(self, learner_bid: int | None = None) -> tuple[float, AgentState | None]:
        rng = self.rng
        m, cap = self.m, self.game.karma_cap
        if self.with_learner:
            k_l = int(self.karma[-1])
            if learner_bid is None or not 0 <= learner_bid <= k_l:
                raise ContractError(f"infeasible learner bid {learner_bid} with karma {k_l}")
        perm = rng.permutation(m)
        bids = sample_bids_kernel(self.cum_pi, self.urg, self.karma, rng.random(m))
        if self.with_learner:
            bids[-1] = learner_bid
        coins = rng.random(m // 2)
        u_learner = int(self.urg[-1])
        pool = compete_kernel(perm, bids, coins, self.karma, self.outcome)

        share, rem = divmod(pool, m)
        extra = rng.choice(m, size=rem, replace=False) if rem else np.zeros(0, dtype=np.int64)
        overflow = grant_kernel(self.karma, share, extra.astype(np.int64), cap)
        while overflow > 0:
            room = np.flatnonzero(self.karma < cap)
            if room.size == 0:
                self.conservation_warnings += overflow
                self.total_karma -= overflow
                break
            self.karma[room[rng.integers(room.size)]] += 1
            overflow -= 1

        self.urg = next_urgency_kernel(self.urg, self.cum_phi, rng.random(m))
        self.step_counter += 1

        if not self.with_learner:
            return 0.0, None
        won = self.outcome[-1] == 1
        r = float(self.game.urgency_values[u_learner]) if won else 0.0
        if self._trace is not None:
            self._trace.writerow([self.step_counter, u_learner, k_l, learner_bid, r])
        return r, self.learner

    def empirical_state_distribution(self) -> np.ndarray:
        """Normalized histogram of population states, learner excluded."""
        n_k = self.game.n_karma
        flat = self.urg[: self.n] * n_k + self.karma[: self.n]
        counts = np.bincount(flat, minlength=self.game.n_states).astype(np.float64)
        return (counts / self.n).reshape(self.game.n_urgency, n_k)

    def close(self):
        if self._trace is not None:
            self._trace_fh.close()
            self._trace = None


def empirical_state_distribution(env: PopulationEnv) -> np.ndarray:
    return env.empirical_state_distribution()
