"""Command line entry point: ``karma-mfg <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def _game(args):
    from karma_mfg.game import GameConfig, load_instance

    if getattr(args, "config", None):
        return GameConfig.from_json(args.config)
    return load_instance(args.instance)


def _load_mf(path):
    from karma_mfg.game import MeanField

    doc = json.loads(Path(path).read_text())
    return MeanField(doc["mu"], doc["pi"]), doc


def cmd_solve_sne(args):
    from karma_mfg.sne import SneSolverConfig, save_sne, solve_sne

    game = _game(args)
    scfg = SneSolverConfig(max_outer_iters=args.max_iters)
    if args.relative_tol:
        scfg.tol_exploit = None
    elif args.tol_exploit is not None:
        scfg.tol_exploit = args.tol_exploit
    res = solve_sne(game, scfg, seed=args.seed)
    save_sne(res, game, args.out, scfg)
    print(f"converged={res.converged} iterations={res.iterations} residual_sne1={res.residual_sne1:.3e} "
          f"exploitability={res.exploitability:.3e} action_gap={res.action_gap:.4g} -> {args.out}")
    return 0 if res.converged else 2


def cmd_train_newcomer(args):
    from karma_mfg.experiments import train_newcomer
    from karma_mfg.neural import DqnConfig
    from karma_mfg.sne import load_sne

    res, game = load_sne(args.sne)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dqn = DqnConfig(buffer_size=args.buffer, total_steps=args.steps, eval_period=args.eval_period,
                    eval_episodes=args.eval_episodes, eps_horizon=args.eps_horizon or args.steps,
                    discount=game.discount)
    tag = f"{args.mode}_buffer{args.buffer}" + (f"_N{args.pop_size}" if args.mode == "pop" else "") + f"_seed{args.seed}"
    rows = train_newcomer(game, res.mean_field, args.mode, dqn, np.random.SeedSequence([args.seed]),
                          pop_size=args.pop_size, csv_path=out / f"{tag}.csv", save_weights=out / f"{tag}.bin")
    step, w, gap, ci = rows[-1]
    print(f"step={step} W_pi={w:.4f} value_gap={gap:.3f}±{ci:.3f} -> {out / tag}.csv")
    return 0


def cmd_fp_dqn(args):
    from karma_mfg.fp import FpConfig, run_fp_dqn
    from karma_mfg.sne import evaluate_mean_field, load_sne, save_sne

    game = _game(args)
    fpd = json.loads(Path(args.fp_config).read_text()) if args.fp_config else {}
    fpd["seed"] = args.seed
    fp = FpConfig.from_dict(fpd)
    ref = None
    if args.sne:
        res, _ = load_sne(args.sne)
        ref = res.mean_field
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = run_fp_dqn(game, fp, ref, out / f"fp_seed{args.seed}.csv", out / f"fp_seed{args.seed}_timing.csv")
    final = evaluate_mean_field(state.mean_field, game, state.iteration, args.seed)
    save_sne(final, game, out / f"fp_seed{args.seed}.sne.json")
    print(f"iterations={state.iteration} exploitability_of_avg={final.exploitability:.4g} -> {out}")
    return 0


def cmd_eval(args):
    from karma_mfg.metrics import EvalConfig, policy_distance, value_gap
    from karma_mfg.neural import QNetwork, extract_greedy_policy
    from karma_mfg.sne import load_sne

    res, game = load_sne(args.sne)
    net = QNetwork.load(args.policy)
    pi = extract_greedy_policy(net, game)
    gap, ci = value_gap(pi, res, game, EvalConfig(args.episodes, args.episode_length), args.seed)
    print(json.dumps({"W_pi": policy_distance(pi, res.mean_field.pi, game), "value_gap": gap, "value_gap_ci": ci}))
    return 0


def cmd_metrics(args):
    from karma_mfg.metrics import mu_distance, policy_distance

    a, doc = _load_mf(args.a)
    b, _ = _load_mf(args.b)
    report = {"W_pi": policy_distance(a.pi, b.pi), "W1_mu": mu_distance(a.mu, b.mu, joint_lp=args.joint_lp)}
    if args.bid_curves:
        from karma_mfg.game import GameConfig
        from karma_mfg.metrics import write_bid_curves_csv

        write_bid_curves_csv(args.bid_curves, a.pi, a.mu, GameConfig.from_dict(doc["game"]))
    print(json.dumps(report))
    return 0


def cmd_experiment(args):
    from karma_mfg.experiments import ExperimentPlan, run_experiment

    plan = ExperimentPlan.from_json(args.plan)
    if args.out:
        plan.output_dir = args.out
    manifest = run_experiment(plan, workers=args.workers)
    failed = [r["run"] for r in manifest["runs"] if r["status"] != "ok"]
    print(f"{len(manifest['runs']) - len(failed)} runs ok, {len(failed)} failed -> {plan.output_dir}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="karma-mfg", description="Karma dynamic population game tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def game_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="game JSON file")
        g.add_argument("--instance", default="instance-2u-k12", help="bundled instance name")

    sp = sub.add_parser("solve-sne", help="compute a stationary Nash equilibrium")
    game_args(sp)
    sp.add_argument("--out", default="sne.json")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-iters", type=int, default=3000)
    sp.add_argument("--tol-exploit", type=float)
    sp.add_argument("--relative-tol", action="store_true", help="exploitability tolerance 1e-4*R_max/(1-alpha)")
    sp.set_defaults(func=cmd_solve_sne)

    sp = sub.add_parser("train-newcomer", help="train one DQN newcomer against an equilibrium")
    sp.add_argument("--sne", required=True)
    sp.add_argument("--mode", choices=["mf", "pop"], default="mf")
    sp.add_argument("--buffer", type=int, default=1_000_000)
    sp.add_argument("--pop-size", type=int, default=1000)
    sp.add_argument("--steps", type=int, default=1_000_000)
    sp.add_argument("--eps-horizon", type=int)
    sp.add_argument("--eval-period", type=int, default=10_000)
    sp.add_argument("--eval-episodes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="runs")
    sp.set_defaults(func=cmd_train_newcomer)

    sp = sub.add_parser("fp-dqn", help="fictitious play with DQN best responses")
    game_args(sp)
    sp.add_argument("--fp-config", help="JSON with FpConfig fields")
    sp.add_argument("--sne", help="reference equilibrium for the distance columns")
    sp.add_argument("--out", default="runs")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_fp_dqn)

    sp = sub.add_parser("eval", help="value gap and policy distance of saved weights")
    sp.add_argument("--policy", required=True, help="weights .bin (with its .json manifest)")
    sp.add_argument("--sne", required=True)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--episode-length", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("metrics", help="distances between two mean fields")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--joint-lp", action="store_true")
    sp.add_argument("--bid-curves", help="write expected-bid curves of --a to this CSV")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("experiment", help="run an experiment plan")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int, help="defaults to KARMA_MFG_THREADS or the CPU count")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
