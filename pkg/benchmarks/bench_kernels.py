"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import timeit

import numpy as np

from karma_mfg import env as envmod
from karma_mfg import neural
from karma_mfg.game import load_instance, uniform_policy, MeanField


def dqn_case(rng, n=128):
    net = neural.QNetwork.init(3, 13, rng)
    tgt = net.copy()
    acc = [np.zeros_like(p) for p in net.params]
    u, k = rng.integers(0, 2, n), rng.integers(0, 13, n)
    a = (rng.random(n) * (k + 1)).astype(np.int64)
    batch = (u, k, a, rng.random(n), rng.integers(0, 2, n), rng.integers(0, 13, n))
    return lambda fn: fn(net.params, tgt.params, acc, *batch, 2, 12, 0.98, 1e-9, 0.99, 1e-8)


def population_case(rng, m=801):
    cum_pi = envmod._cumulative(uniform_policy(2, 13))
    urg, karma = rng.integers(0, 2, m), rng.integers(0, 13, m)
    phi = envmod._cumulative(np.full((2, 2), 0.5))

    def run(kind):
        sample, compete, grant, nxt = kind
        k = karma.copy()
        out = np.zeros(m, dtype=np.int64)
        bids = sample(cum_pi, urg, k, rng.random(m))
        pool = compete(rng.permutation(m), bids, rng.random(m // 2), k, out)
        extra = rng.choice(m, pool % m, replace=False).astype(np.int64)
        grant(k, pool // m, extra, 12)
        nxt(urg, phi, rng.random(m))

    return run


def rollout_case(rng):
    g = load_instance("instance-2u-k12")
    mu = np.full((2, 13), 1 / 26)
    env = envmod.MeanFieldEnv(g, MeanField(mu, uniform_policy(2, 13)), rng)
    cum_pi = envmod._cumulative(uniform_policy(2, 13))
    unif = rng.random((1000, 3))
    return lambda fn: fn(cum_pi, env.rewards, env.cum_phi, env.cum_kappa, 0, 4, unif)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    dqn = dqn_case(rng)
    pop = population_case(rng)
    roll = rollout_case(rng)
    cases = [
        ("dqn update (batch 128)", lambda: dqn(neural._dqn_update_nb_wrap), lambda: dqn(neural._dqn_update_np)),
        ("population step (801 agents)",
         lambda: pop((envmod._sample_bids_nb, envmod._compete_nb, envmod._grant_nb, envmod._next_urgency_nb)),
         lambda: pop((envmod._sample_bids_np, envmod._compete_np, envmod._grant_np, envmod._next_urgency_np))),
        ("eval rollout (1000 steps)", lambda: roll(envmod._rollout_nb), lambda: roll(envmod._rollout_py)),
    ]
    print(f"{'kernel':32s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for name, fast, slow in cases:
        fast(), slow()  # compile and warm caches
        n = args.repeat if "rollout" not in name else max(args.repeat // 20, 3)
        t_nb = min(timeit.repeat(fast, number=n, repeat=3)) / n * 1e6
        t_np = min(timeit.repeat(slow, number=n, repeat=3)) / n * 1e6
        print(f"{name:32s} {t_nb:10.1f} {t_np:10.1f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
