"""Distances between policies and state distributions, value-gap
evaluation and confidence intervals."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from karma_mfg.env import MeanFieldEnv, mf_episode_return, sample_states
from karma_mfg.game import ContractError, GameConfig, MeanField

SIMPLEX_TOL = 1e-9
Z95 = 1.96


@dataclass
class MetricReport:
    policy_distance: float
    mu_distance: float
    value_gap: float
    value_gap_ci: float
    index: int = 0


def _check_simplex(p: np.ndarray, name: str):
    if np.any(p < -SIMPLEX_TOL) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"{name} is not a probability vector (sum {p.sum():.3e})")


def w1_discrete_1d(p, q, grid_spacing: float = 1.0) -> float:
    """Exact 1-D optimal transport cost on an evenly spaced grid."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError("w1_discrete_1d needs two vectors of equal length")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    return float(grid_spacing * np.abs(np.cumsum(p - q)[:-1]).sum())


def _w1_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.abs(np.cumsum(P - Q, axis=-1)[..., :-1]).sum(axis=-1)


def policy_distance(pi1: np.ndarray, pi2: np.ndarray, cfg: GameConfig | None = None) -> float:
    """Bid-distribution W1 averaged uniformly over every state."""
    pi1 = np.asarray(pi1, dtype=np.float64)
    pi2 = np.asarray(pi2, dtype=np.float64)
    if pi1.shape != pi2.shape:
        raise ContractError(f"policy shapes differ: {pi1.shape} vs {pi2.shape}")
    if cfg is not None and pi1.shape != (cfg.n_urgency, cfg.n_karma, cfg.n_karma):
        raise ContractError("policy shape does not match the game")
    return float(_w1_rows(pi1, pi2).mean())


def _conditionals(mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    marg = mu.sum(axis=1)
    cond = np.empty_like(mu)
    for u in range(mu.shape[0]):
        cond[u] = mu[u] / marg[u] if marg[u] > 0 else 1.0 / mu.shape[1]
    return marg, cond


def transport_lp(p: np.ndarray, q: np.ndarray, cost: np.ndarray) -> float:
    """Optimal transport cost by linear programming (small supports only)."""
    from scipy.optimize import linprog

    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def mu_distance(mu1: np.ndarray, mu2: np.ndarray, cfg: GameConfig | None = None, joint_lp: bool = False) -> float:
    """W1 between state distributions ``mu[u, k]``.

    Default: karma W1 of the per-urgency conditionals, weighted by the
    averaged urgency marginals.  ``joint_lp`` instead solves the full
    transport problem with ground cost ``|k - k'| + K * [u != u']``.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    if mu1.shape != mu2.shape:
        raise ContractError("state distributions differ in shape")
    _check_simplex(mu1.ravel(), "mu1")
    _check_simplex(mu2.ravel(), "mu2")
    n_u, n_k = mu1.shape
    if joint_lp:
        u = np.repeat(np.arange(n_u), n_k)
        k = np.tile(np.arange(n_k), n_u)
        cost = np.abs(k[:, None] - k[None, :]) + (n_k - 1) * (u[:, None] != u[None, :])
        return transport_lp(mu1.ravel(), mu2.ravel(), cost.astype(np.float64))
    m1, c1 = _conditionals(mu1)
    m2, c2 = _conditionals(mu2)
    return float(((m1 + m2) / 2 * _w1_rows(c1, c2)).sum())


def mean_ci(values, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and 95% normal half-width ``1.96 * std / sqrt(n)``."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[axis]
    mean = v.mean(axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, Z95 * v.std(axis=axis, ddof=1) / np.sqrt(n)


@dataclass
class EvalConfig:
    episodes: int = 10
    episode_length: int = 1000


class ValueGapEvaluator:
    """Reusable mean-field evaluation against a frozen equilibrium."""

    def __init__(self, game: GameConfig, equilibrium: MeanField, eval_cfg: EvalConfig | None = None):
        self.game = game
        self.eq = equilibrium
        self.eval_cfg = eval_cfg or EvalConfig()
        self.env = MeanFieldEnv(game, equilibrium, np.random.default_rng(0))

    def draws(self, seed) -> list[tuple[tuple[int, int], np.ndarray]]:
        ec = self.eval_cfg
        out = []
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        for ss in root.spawn(ec.episodes):
            rng = np.random.default_rng(ss)
            u, k = sample_states(self.eq.mu, 1, rng)
            out.append(((int(u[0]), int(k[0])), rng.random((ec.episode_length, 3))))
        return out

    def returns(self, policy: np.ndarray, draws) -> np.ndarray:
        return np.array([mf_episode_return(self.env, policy, s, unif) for s, unif in draws])

    def gap(self, policy: np.ndarray, seed, draws=None, reference_returns=None) -> tuple[float, float]:
        draws = draws if draws is not None else self.draws(seed)
        ref = reference_returns if reference_returns is not None else self.returns(self.eq.pi, draws)
        diff = ref - self.returns(policy, draws)
        mean, ci = mean_ci(diff)
        return float(mean), float(ci)


def value_gap(learned_policy: np.ndarray, sne, game: GameConfig, eval_cfg: EvalConfig | None = None,
              seed=0) -> tuple[float, float]:
    """Equilibrium return minus learned-policy return over paired episodes
    sharing their random numbers; returns ``(gap, 95% half-width)``."""
    eq = sne.mean_field if hasattr(sne, "mean_field") else sne
    return ValueGapEvaluator(game, eq, eval_cfg).gap(learned_policy, seed)


def expected_bid_curves(pi: np.ndarray, mu: np.ndarray | None = None, cfg: GameConfig | None = None) -> np.ndarray:
    """``E[a | u, k]`` for every state."""
    pi = np.asarray(pi, dtype=np.float64)
    return pi @ np.arange(pi.shape[-1], dtype=np.float64)


def write_bid_curves_csv(path, pi: np.ndarray, mu: np.ndarray, cfg: GameConfig):
    curves = expected_bid_curves(pi, mu, cfg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["urgency", "karma", "expected_bid", "state_mass"])
        for u in range(curves.shape[0]):
            for k in range(curves.shape[1]):
                w.writerow([cfg.urgency_values[u], k, repr(float(curves[u, k])), repr(float(mu[u, k]))])
