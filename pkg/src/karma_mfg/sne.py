"""Centralized stationary Nash equilibrium by smoothed fictitious play on the
mean-field map, plus equilibrium diagnostics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from karma_mfg.game import (
    GameConfig,
    MeanField,
    karma_kernel_table,
    reward_table,
    state_chain,
    uniform_policy,
)

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


@dataclass
class ValueTables:
    """Optimal ``q[u, k, a]`` (``-inf`` where ``a > k``) and ``v[u, k]``."""

    q: np.ndarray
    v: np.ndarray

    def greedy(self) -> np.ndarray:
        """Greedy bids ``[u, k]``, lowest bid on ties."""
        return np.argmax(self.q, axis=-1)


@dataclass
class SneSolverConfig:
    damping_policy: float = 0.2
    damping_mu: float = 0.2
    tau0: float = 1.0
    tau_decay: float = 0.95
    tau_min: float = 1e-4
    max_outer_iters: int = 3000
    tol_sne1: float = 1e-8
    tol_exploit: float | None = 1e-4
    vi_tol: float = 1e-9
    power_iter_tol: float = 1e-12
    hold_iters: int = 300
    step_decay: float = 50.0
    flow_steps: int = 20

    def __post_init__(self):
        for name in ("tol_sne1", "vi_tol", "power_iter_tol", "tau0", "tau_min", "step_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tol_exploit is not None and not self.tol_exploit > 0:
            raise ValueError("tol_exploit must be positive")
        for name in ("damping_policy", "damping_mu"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")

    def exploit_tolerance(self, cfg: GameConfig) -> float:
        """Absolute exploitability tolerance; ``None`` means ``1e-4`` of the
        largest possible value magnitude."""
        if self.tol_exploit is not None:
            return self.tol_exploit
        scale = cfg.max_reward / (1.0 - cfg.discount)
        return 1e-4 * scale if scale > 0 else 1e-12


@dataclass
class SneResult:
    mean_field: MeanField
    values: ValueTables
    residual_sne1: float
    exploitability: float
    action_gap: float
    iterations: int
    converged: bool
    seed: int | None = None
    history: list = field(default_factory=list, repr=False)


def _bellman(q: np.ndarray, r: np.ndarray, kappa2d: np.ndarray, phi: np.ndarray, alpha: float) -> np.ndarray:
    v = q.max(axis=-1)
    ev = phi @ v  # ev[u, k_next]
    n_u, n_k = v.shape
    cont = (kappa2d @ ev.T).T.reshape(n_u, n_k, n_k)
    return r[:, None, :] + alpha * cont


def value_iteration(mf: MeanField, cfg: GameConfig, tol: float = 1e-9, q0: np.ndarray | None = None,
                    max_iter: int = 200_000, kappa: np.ndarray | None = None) -> ValueTables:
    """Optimal Q under the frozen mean field, to ``||Q - Q*|| <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    n_u, n_k = cfg.n_urgency, cfg.n_karma
    if kappa is None:
        kappa = karma_kernel_table(mf, cfg.karma_cap)
    r = reward_table(mf, cfg)
    feas = cfg.feasible_mask()
    kappa2d = kappa.reshape(n_k * n_k, n_k)
    q = np.zeros((n_u, n_k, n_k)) if q0 is None else np.array(q0, dtype=np.float64)
    q[:, ~feas] = -np.inf
    stop = tol * (1.0 - cfg.discount)
    res = np.inf
    for _ in range(max_iter):
        nq = _bellman(q, r, kappa2d, cfg.urgency_chain, cfg.discount)
        nq[:, ~feas] = -np.inf
        res = np.max(np.abs(nq[:, feas] - q[:, feas]))
        q = nq
        if res <= stop:
            return ValueTables(q, q.max(axis=-1))
    raise ConvergenceError("value iteration did not converge", res)


def bellman_operator(q: np.ndarray, mf: MeanField, cfg: GameConfig) -> np.ndarray:
    """One application of the optimal Bellman operator (infeasible entries ``-inf``)."""
    n_k = cfg.n_karma
    kappa2d = karma_kernel_table(mf, cfg.karma_cap).reshape(n_k * n_k, n_k)
    nq = _bellman(q, reward_table(mf, cfg), kappa2d, cfg.urgency_chain, cfg.discount)
    nq[:, ~cfg.feasible_mask()] = -np.inf
    return nq


def one_step_image(mf: MeanField, cfg: GameConfig, kappa: np.ndarray | None = None) -> np.ndarray:
    mu_next = mf.mu.reshape(-1) @ state_chain(mf, cfg, kappa)
    return mu_next.reshape(mf.mu.shape)


def stationary_distribution(mf: MeanField, cfg: GameConfig, tol: float = 1e-12, max_iter: int = 2_000_000,
                            mu0: np.ndarray | None = None) -> np.ndarray:
    """Stationary law of the state chain with the kernel frozen at ``mf``.

    Lazy power iteration; stops when ``||mu P - mu||_1 <= tol``.
    """
    P = state_chain(mf, cfg)
    x = (mf.mu if mu0 is None else mu0).reshape(-1).copy()
    res = np.inf
    for _ in range(max_iter):
        xp = x @ P
        res = np.abs(xp - x).sum()
        if res <= tol:
            x = np.clip(x, 0.0, None)
            return (x / x.sum()).reshape(mf.mu.shape)
        x = 0.5 * (x + xp)
        x /= x.sum()
    raise ConvergenceError("power iteration did not converge", res)


def softmax_response(values: ValueTables | np.ndarray, tau: float) -> np.ndarray:
    """Logit response ``pi[a|x] ~ exp(q[x, a] / tau)`` over feasible bids."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = values.q if isinstance(values, ValueTables) else np.asarray(values, dtype=np.float64)
    z = (q - q.max(axis=-1, keepdims=True)) / tau
    w = np.exp(z)  # exp(-inf) == 0 masks infeasible bids
    return w / w.sum(axis=-1, keepdims=True)


def exploitability(values: ValueTables, pi: np.ndarray) -> float:
    q = np.where(np.isfinite(values.q), values.q, 0.0)
    on_policy = np.sum(pi * q, axis=-1)
    return float(np.max(values.v - on_policy))


def sne_residuals(mf: MeanField, cfg: GameConfig, vi_tol: float = 1e-9,
                  values: ValueTables | None = None) -> tuple[float, float]:
    """``(L1 stationarity residual, exploitability)``; both vanish at an SNE."""
    kappa = karma_kernel_table(mf, cfg.karma_cap)
    res1 = float(np.abs(one_step_image(mf, cfg, kappa) - mf.mu).sum())
    if values is None:
        values = value_iteration(mf, cfg, vi_tol, kappa=kappa)
    return res1, max(0.0, exploitability(values, mf.pi))


def action_gap(sne: SneResult | tuple[np.ndarray, np.ndarray]) -> float:
    """Smallest margin of the equilibrium bid over the best other bid.

    States with a single feasible bid are skipped; ``inf`` when every state is
    skipped.  A negative value means the equilibrium mode is not greedy.
    """
    if isinstance(sne, SneResult):
        q, pi = sne.values.q, sne.mean_field.pi
    else:
        q, pi = sne
    n_k = q.shape[1]
    if n_k < 2:
        return math.inf
    chosen = np.argmax(pi, axis=-1)
    best = np.take_along_axis(q, chosen[..., None], axis=-1)[..., 0]
    others = q.copy()
    np.put_along_axis(others, chosen[..., None], -np.inf, axis=-1)
    gaps = best - others.max(axis=-1)
    return float(np.min(gaps[:, 1:]))


def initial_mean_field(cfg: GameConfig) -> MeanField:
    mu = np.zeros((cfg.n_urgency, cfg.n_karma))
    mu[:, cfg.avg_karma] = cfg.urgency_stationary()
    return MeanField(mu, uniform_policy(cfg.n_urgency, cfg.n_karma))


def mean_field_flow(mf: MeanField, cfg: GameConfig, steps: int | None = None, tol: float | None = None,
                    max_steps: int = 100_000) -> np.ndarray:
    """Push ``mu`` through the population dynamics with ``pi`` held fixed.

    Runs ``steps`` updates, or until the one-step L1 change drops below
    ``tol``.  Unlike :func:`stationary_distribution` the kernel is recomputed
    every step, so average karma is preserved.
    """
    mu = mf.mu
    n = steps if steps is not None else max_steps
    for _ in range(n):
        nxt = one_step_image(MeanField(mu, mf.pi), cfg)
        done = tol is not None and np.abs(nxt - mu).sum() <= tol
        mu = nxt
        if done:
            break
    return mu / mu.sum()


def solve_sne(cfg: GameConfig, scfg: SneSolverConfig | None = None, seed: int | None = 0) -> SneResult:
    """Smoothed fictitious play on the mean-field map.

    Each outer step computes optimal Q under the current mean field, mixes the
    logit response into the policy (fixed weight for ``hold_iters`` steps,
    then decaying like ``1/t`` so cycling best responses average out), and moves the
    state law along the karma-conserving population flow.  Once the
    exploitability tolerance is met the state law is relaxed to the flow's
    fixed point and both residuals are re-checked.  Deterministic; ``seed``
    is only recorded.
    """
    scfg = scfg or SneSolverConfig()
    tol_exploit = scfg.exploit_tolerance(cfg)
    mf = initial_mean_field(cfg)
    tau = scfg.tau0
    q = None
    history = []
    res1 = expl = math.inf
    vt = None
    converged = False
    it = 0
    for it in range(1, scfg.max_outer_iters + 1):
        vt = value_iteration(mf, cfg, scfg.vi_tol, q0=q)
        q = vt.q
        res1, expl = sne_residuals(mf, cfg, values=vt)
        history.append((it, tau, res1, expl))
        if it % 100 == 0:
            log.info("sne iter %d tau=%.2e res1=%.3e expl=%.3e", it, tau, res1, expl)
        if expl <= tol_exploit:
            if res1 > scfg.tol_sne1:
                mu = mean_field_flow(mf, cfg, tol=0.1 * scfg.tol_sne1)
                mf = MeanField(mu, mf.pi)
                vt = value_iteration(mf, cfg, scfg.vi_tol, q0=q)
                q = vt.q
                res1, expl = sne_residuals(mf, cfg, values=vt)
            if res1 <= scfg.tol_sne1 and expl <= tol_exploit:
                converged = True
                break
        lam = scfg.damping_policy
        if it > scfg.hold_iters:
            lam *= scfg.step_decay / (scfg.step_decay + it - scfg.hold_iters)
        br = softmax_response(vt, tau)
        pi = (1.0 - lam) * mf.pi + lam * br
        pi /= pi.sum(axis=-1, keepdims=True)
        mu = mean_field_flow(MeanField(mf.mu, pi), cfg, steps=scfg.flow_steps)
        mu = (1.0 - scfg.damping_mu) * mf.mu + scfg.damping_mu * mu
        mf = MeanField(mu / mu.sum(), pi)
        tau = max(tau * scfg.tau_decay, scfg.tau_min)
    result = SneResult(mf, vt, res1, expl, 0.0, it, converged, seed, history)
    result.action_gap = action_gap(result)
    return result


def evaluate_mean_field(mf: MeanField, cfg: GameConfig, iterations: int = 0, seed: int | None = None,
                        vi_tol: float = 1e-9) -> SneResult:
    """Equilibrium diagnostics of an arbitrary mean field, packaged like a
    solver result (``converged`` is always False)."""
    values = value_iteration(mf, cfg, vi_tol)
    res1, expl = sne_residuals(mf, cfg, vi_tol, values)
    return SneResult(mf, values, res1, expl, action_gap((values.q, mf.pi)), iterations, False, seed)


def _table_to_json(a: np.ndarray):
    return [[[None if not math.isfinite(x) else x for x in row] for row in mat] for mat in a.tolist()]


def _table_from_json(a) -> np.ndarray:
    return np.array([[[(-np.inf if x is None else x) for x in row] for row in mat] for mat in a], dtype=np.float64)


def save_sne(result: SneResult, cfg: GameConfig, path, scfg: SneSolverConfig | None = None):
    """Write the ``sne.json`` interchange document."""
    gap = result.action_gap
    doc = {
        "game": cfg.to_dict(),
        "mu": result.mean_field.mu.tolist(),
        "pi": result.mean_field.pi.tolist(),
        "q": _table_to_json(result.values.q) if result.values is not None else None,
        "v": result.values.v.tolist() if result.values is not None else None,
        "residual_sne1": result.residual_sne1,
        "exploitability": result.exploitability,
        "action_gap": gap if math.isfinite(gap) else None,
        "iterations": result.iterations,
        "converged": bool(result.converged),
        "seed": result.seed,
    }
    if scfg is not None:
        doc["solver"] = asdict(scfg)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc) + "\n")


def load_sne(path) -> tuple[SneResult, GameConfig]:
    doc = json.loads(Path(path).read_text())
    cfg = GameConfig.from_dict(doc["game"])
    mf = MeanField(doc["mu"], doc["pi"])
    values = None
    if doc.get("q") is not None:
        q = _table_from_json(doc["q"])
        values = ValueTables(q, q.max(axis=-1))
    gap = doc.get("action_gap")
    res = SneResult(mf, values, doc.get("residual_sne1", math.nan), doc.get("exploitability", math.nan),
                    math.inf if gap is None else gap, doc.get("iterations", 0), doc.get("converged", False),
                    doc.get("seed"))
    return res, cfg
