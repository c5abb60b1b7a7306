"""Experiment orchestration: newcomer training sweeps and FP-DQN seed
sweeps, with per-run CSVs, seed-aggregated CSVs and a run manifest."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from karma_mfg.env import MeanFieldEnv, PopulationEnv
from karma_mfg.fp import FpConfig, run_fp_dqn
from karma_mfg.game import GameConfig, MeanField, load_instance
from karma_mfg.metrics import EvalConfig, ValueGapEvaluator, mean_ci, policy_distance
from karma_mfg.neural import DqnAgent, DqnConfig

log = logging.getLogger(__name__)

KINDS = ("newcomer-mf", "newcomer-pop", "fp-dqn")
RUN_HEADER = ["step", "W_pi", "value_gap", "value_gap_ci"]
FP_HEADER = ["iteration", "W1_mu", "W_pi", "exploitability_of_avg"]


def worker_budget() -> int:
    env = os.environ.get("KARMA_MFG_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_seed(master_seed: int, seed: int) -> np.random.SeedSequence:
    """Random stream of one run.  It depends on the seed only, not on the
    sweep value, so sweep points share initial weights and environment
    noise."""
    return np.random.SeedSequence([master_seed, seed])


# ---------------------------------------------------------------- newcomer

def train_newcomer(game: GameConfig, equilibrium: MeanField, mode: str, dqn: DqnConfig, seed_seq,
                   pop_size: int = 1000, csv_path=None, evaluator: ValueGapEvaluator | None = None,
                   save_weights=None) -> list[tuple]:
    """Train one learner against the equilibrium and return the evaluation
    rows ``(step, W_pi, value_gap, value_gap_ci)``, step 0 included."""
    if mode not in ("mf", "pop"):
        raise ValueError(f"unknown mode {mode!r}")
    if not isinstance(seed_seq, np.random.SeedSequence):
        seed_seq = np.random.SeedSequence(seed_seq)
    agent_ss, env_ss, eval_ss = seed_seq.spawn(3)
    agent = DqnAgent(game, dqn, np.random.default_rng(agent_ss))
    env_rng = np.random.default_rng(env_ss)
    evaluator = evaluator or ValueGapEvaluator(game, equilibrium, EvalConfig(dqn.eval_episodes, dqn.episode_length))
    draws = evaluator.draws(eval_ss)
    ref = evaluator.returns(equilibrium.pi, draws)

    if mode == "mf":
        env = MeanFieldEnv(game, equilibrium, env_rng)
        reset = env.reset
    else:
        env = PopulationEnv(game, equilibrium.pi, pop_size, env_rng)

        def reset():
            env.reset(equilibrium)
            return env.learner

    rows = []

    def record(step):
        pi_hat = agent.greedy_policy()
        gap, ci = evaluator.gap(pi_hat, None, draws, ref)
        rows.append((step, policy_distance(pi_hat, equilibrium.pi), gap, ci))

    record(0)
    step = 0
    while step < dqn.total_steps:
        s = reset()
        for _ in range(min(dqn.episode_length, dqn.total_steps - step)):
            a = agent.act(s)
            r, s2 = env.step(a)
            agent.observe(s, a, r, s2)
            s = s2
            step += 1
            if step % dqn.eval_period == 0:
                record(step)
    if csv_path is not None:
        write_rows(csv_path, RUN_HEADER, rows)
    if save_weights is not None:
        agent.online.save(save_weights, {"mode": mode, "steps": step, "buffer_size": dqn.buffer_size})
    return rows


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [repr(float(x)) if x != "" else "" for x in row[1:]])


def read_rows(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        data = [[float(x) if x else np.nan for x in row] for row in rd]
    return header, np.array(data, dtype=np.float64)


# ---------------------------------------------------------------- plans

@dataclass
class ExperimentPlan:
    kind: str
    sweep: list
    seeds: list
    output_dir: str = "runs"
    game: str | dict = "instance-2u-k12"
    sne: str | None = None
    master_seed: int = 0
    eval_period: int = 10_000
    eval_episodes: int = 10
    total_steps: int = 200_000
    buffer_size: int = 400_000
    pop_size: int = 1000
    eps_horizon: int | None = None  # defaults to total_steps
    dqn: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.sweep or not self.seeds:
            raise ValueError("sweep and seeds must be non-empty")

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        with open(path) as fh:
            d = json.load(fh)
        d.pop("comment", None)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def game_config(self) -> GameConfig:
        if isinstance(self.game, dict):
            return GameConfig.from_dict(self.game)
        if os.path.exists(self.game):
            return GameConfig.from_json(self.game)
        return load_instance(self.game)

    def dqn_config(self, game: GameConfig, value) -> DqnConfig:
        d = dict(total_steps=self.total_steps, buffer_size=self.buffer_size, eval_period=self.eval_period,
                 eval_episodes=self.eval_episodes, eps_horizon=self.eps_horizon or self.total_steps,
                 discount=game.discount)
        d.update(self.dqn)
        if self.kind == "newcomer-mf":
            d["buffer_size"] = int(value)
        return DqnConfig(**d)

    def run_name(self, value, seed) -> str:
        label = {"newcomer-mf": "buffer", "newcomer-pop": "N", "fp-dqn": "N"}[self.kind]
        return f"{label}{value}_seed{seed}"


def equilibrium_for(plan: ExperimentPlan, game: GameConfig) -> MeanField:
    from karma_mfg.sne import load_sne, save_sne, solve_sne

    if plan.sne and os.path.exists(plan.sne):
        res, _ = load_sne(plan.sne)
        return res.mean_field
    res = solve_sne(game)
    if plan.sne:
        save_sne(res, game, plan.sne)
    return res.mean_field


def _execute(args) -> dict:
    plan, game, eq, value, seed = args
    out = Path(plan.output_dir)
    name = plan.run_name(value, seed)
    t0 = time.perf_counter()
    try:
        ss = run_seed(plan.master_seed, seed)
        if plan.kind == "fp-dqn":
            fpd = dict(plan.fp)
            fpd.setdefault("population_size", int(value))
            fpd["seed"] = int(ss.generate_state(1)[0])
            fp = FpConfig.from_dict(fpd)
            run_fp_dqn(game, fp, eq, out / f"{name}.csv", out / f"{name}_timing.csv")
        else:
            mode = "mf" if plan.kind == "newcomer-mf" else "pop"
            pop = int(value) if mode == "pop" else plan.pop_size
            train_newcomer(game, eq, mode, plan.dqn_config(game, value), ss, pop_size=pop,
                           csv_path=out / f"{name}.csv")
        status, err = "ok", None
    except Exception as exc:  # recorded in the manifest; the sweep goes on
        status, err = "failed", "".join(traceback.format_exception(exc))
        log.error("run %s failed: %s", name, exc)
    return {"run": name, "sweep_value": value, "seed": seed, "status": status, "error": err,
            "wall_time": round(time.perf_counter() - t0, 3)}


def run_experiment(plan: ExperimentPlan, equilibrium: MeanField | None = None, workers: int | None = None) -> dict:
    """Execute every (sweep value, seed) run, then aggregate over seeds."""
    game = plan.game_config()
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    eq = equilibrium if equilibrium is not None else equilibrium_for(plan, game)
    jobs = [(plan, game, eq, v, s) for v in plan.sweep for s in plan.seeds]
    workers = min(workers or worker_budget(), len(jobs))
    if workers <= 1:
        runs = [_execute(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_execute, jobs))
    aggregate(plan)
    manifest = {"plan": plan.to_dict(), "runs": runs}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def aggregate(plan: ExperimentPlan):
    """Seed means and 95% intervals per sweep value and index."""
    out = Path(plan.output_dir)
    fp = plan.kind == "fp-dqn"
    cols = ["W1_mu", "W_pi"] if fp else ["W_pi", "value_gap"]
    header = ["iteration" if fp else "step", "sweep_value"]
    for c in cols:
        header += [f"{c}_mean", f"{c}_ci_low", f"{c}_ci_high"]
    rows = []
    for value in plan.sweep:
        tables = []
        for seed in plan.seeds:
            path = out / f"{plan.run_name(value, seed)}.csv"
            if path.exists():
                h, data = read_rows(path)
                tables.append((h, data))
        if not tables:
            continue
        h = tables[0][0]
        n = min(len(t[1]) for t in tables)
        stack = np.stack([t[1][:n] for t in tables])
        for i in range(n):
            row = [int(stack[0, i, 0]), value]
            for c in cols:
                mean, ci = mean_ci(stack[:, i, h.index(c)])
                row += [repr(float(mean)), repr(float(mean - ci)), repr(float(mean + ci))]
            rows.append(row)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_curves(plan: ExperimentPlan, column: str) -> dict:
    """``{sweep_value: array[seed, index]}`` of one CSV column."""
    out = Path(plan.output_dir)
    curves = {}
    for value in plan.sweep:
        series = []
        for seed in plan.seeds:
            h, data = read_rows(out / f"{plan.run_name(value, seed)}.csv")
            series.append(data[:, h.index(column)])
        n = min(len(s) for s in series)
        curves[value] = np.stack([s[:n] for s in series])
    return curves
