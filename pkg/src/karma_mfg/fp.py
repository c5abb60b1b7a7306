"""Fictitious play with a DQN best-response learner (FP-DQN).

Each outer iteration trains a fresh learner for E episodes against a
finite population frozen at the running-average mean field, then folds
the learner's greedy policy and the population's empirical state
distribution into the averages.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from karma_mfg.env import PopulationEnv
from karma_mfg.game import ContractError, GameConfig, MeanField, uniform_policy
from karma_mfg.metrics import mu_distance, policy_distance
from karma_mfg.neural import DqnAgent, DqnConfig

log = logging.getLogger(__name__)


@dataclass
class FpConfig:
    outer_iters: int = 100
    episodes_per_iter: int = 100
    population_size: int = 1000
    episode_length: int = 1000
    dqn: DqnConfig | None = None
    seed: int = 0
    fresh_buffer: bool = True
    init_mu_mean_karma: bool = False
    average_last_m: int = 0  # 0: measure mu at the end of the final episode only
    track_exploitability: bool = False

    def __post_init__(self):
        for name in ("outer_iters", "episodes_per_iter", "population_size", "episode_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.average_last_m < 0 or self.average_last_m > self.episodes_per_iter:
            raise ValueError("average_last_m must lie in [0, episodes_per_iter]")

    def learner_config(self, game: GameConfig) -> DqnConfig:
        """Per-iteration learner settings; the step budget and exploration
        horizon both cover the E episodes of one iteration."""
        if self.dqn is not None:
            return self.dqn
        steps = self.episodes_per_iter * self.episode_length
        return DqnConfig(total_steps=steps, eps_horizon=steps, discount=game.discount)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dqn"] = None if self.dqn is None else self.dqn.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FpConfig":
        d = dict(d)
        if d.get("dqn") is not None:
            d["dqn"] = DqnConfig(**d["dqn"])
        return cls(**d)


@dataclass
class FpState:
    avg_mu: np.ndarray
    avg_pi: np.ndarray
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def mean_field(self) -> MeanField:
        return MeanField(self.avg_mu.copy(), self.avg_pi.copy())


def fp_average(avg: np.ndarray, new_value: np.ndarray, i: int) -> np.ndarray:
    """Running mean ``i/(i+1) * avg + 1/(i+1) * new``."""
    avg = np.asarray(avg, dtype=np.float64)
    new_value = np.asarray(new_value, dtype=np.float64)
    if avg.shape != new_value.shape:
        raise ContractError(f"shape mismatch {avg.shape} vs {new_value.shape}")
    if i < 0:
        raise ContractError("iteration index must be non-negative")
    if i == 0:
        return new_value.copy()
    return (i / (i + 1)) * avg + (1.0 / (i + 1)) * new_value


def initial_fp_state(game: GameConfig, fp: FpConfig) -> FpState:
    n_u, n_k = game.n_urgency, game.n_karma
    if fp.init_mu_mean_karma:
        mu = np.zeros((n_u, n_k))
        mu[:, game.avg_karma] = game.urgency_stationary()
    else:
        mu = np.full((n_u, n_k), 1.0 / (n_u * n_k))
    return FpState(mu, uniform_policy(n_u, n_k))


def run_fp_dqn(game: GameConfig, fp: FpConfig, reference: MeanField | None = None, csv_path=None,
               timing_path=None, on_iteration=None) -> FpState:
    """Run the outer loop; ``reference`` (an equilibrium) enables the
    distance columns of the per-iteration CSV."""
    root = np.random.SeedSequence([fp.seed])
    agent_ss, env_ss = root.spawn(2)
    agent = DqnAgent(game, fp.learner_config(game), np.random.default_rng(agent_ss))
    env = PopulationEnv(game, uniform_policy(game.n_urgency, game.n_karma), fp.population_size,
                        np.random.default_rng(env_ss))
    state = initial_fp_state(game, fp)
    writer = timer = None
    fh = tfh = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "W1_mu", "W_pi", "exploitability_of_avg"])
        if reference is not None:
            writer.writerow([0, repr(mu_distance(state.avg_mu, reference.mu)),
                             repr(policy_distance(state.avg_pi, reference.pi)), _exploit_cell(game, state, fp)])
    if timing_path is not None:
        tfh = open(timing_path, "w", newline="")
        timer = csv.writer(tfh, lineterminator="\n")
        timer.writerow(["iteration", "wall_time"])
    t0 = time.perf_counter()
    try:
        for i in range(fp.outer_iters):
            frozen = state.mean_field
            agent.reset_learner(fp.fresh_buffer)
            snapshots = []
            for e in range(fp.episodes_per_iter):
                env.reset(frozen)
                s = env.learner
                for _ in range(fp.episode_length):
                    a = agent.act(s)
                    r, s2 = env.step(a)
                    agent.observe(s, a, r, s2)
                    s = s2
                if e >= fp.episodes_per_iter - max(fp.average_last_m, 1):
                    snapshots.append(env.empirical_state_distribution())
            mu_i = np.mean(snapshots, axis=0) if len(snapshots) > 1 else snapshots[0]
            pi_i = agent.greedy_policy()
            state.avg_mu = fp_average(state.avg_mu, mu_i, i)
            state.avg_pi = fp_average(state.avg_pi, pi_i, i)
            state.iteration = i + 1
            rec = {"iteration": i + 1, "mu": mu_i, "pi": pi_i}
            if reference is not None:
                rec["W1_mu"] = mu_distance(state.avg_mu, reference.mu)
                rec["W_pi"] = policy_distance(state.avg_pi, reference.pi)
            state.history.append(rec)
            if writer is not None:
                writer.writerow([i + 1, repr(rec.get("W1_mu", float("nan"))), repr(rec.get("W_pi", float("nan"))),
                                 _exploit_cell(game, state, fp)])
                fh.flush()
            if timer is not None:
                timer.writerow([i + 1, f"{time.perf_counter() - t0:.3f}"])
                tfh.flush()
            if env.conservation_warnings:
                log.warning("population destroyed %d karma units so far", env.conservation_warnings)
            if on_iteration is not None:
                on_iteration(state)
    finally:
        for h in (fh, tfh):
            if h is not None:
                h.close()
    return state


def _exploit_cell(game: GameConfig, state: FpState, fp: FpConfig) -> str:
    if not fp.track_exploitability:
        return ""
    from karma_mfg.sne import sne_residuals

    return repr(sne_residuals(state.mean_field, game)[1])
