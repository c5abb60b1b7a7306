import math

import numpy as np
import pytest

from conftest import random_mean_field
from karma_mfg.game import MeanField, deterministic_policy, state_chain, uniform_policy
from karma_mfg.sne import (
    ConvergenceError, SneSolverConfig, ValueTables, action_gap, bellman_operator, exploitability,
    initial_mean_field, load_sne, mean_field_flow, save_sne, sne_residuals, softmax_response, solve_sne,
    stationary_distribution, value_iteration,
)
from karma_mfg.game import karma_kernel_table, reward_table


def policy_value_oracle(mf, cfg, pi):
    """V^pi by a direct linear solve of (I - alpha P_pi) V = r_pi."""
    n_u, n_k = cfg.n_urgency, cfg.n_karma
    r = reward_table(mf, cfg)
    kappa = karma_kernel_table(mf, cfg.karma_cap)
    r_pi = np.einsum("uka,ua->uk", pi, r).ravel()
    P = np.einsum("uka,kaj,uv->ukvj", pi, kappa, cfg.urgency_chain).reshape(n_u * n_k, n_u * n_k)
    v = np.linalg.solve(np.eye(n_u * n_k) - cfg.discount * P, r_pi)
    return v.reshape(n_u, n_k)


def test_value_iteration_matches_linear_solve(rng, game_k12):
    mf = random_mean_field(rng, 2, 13)
    vt = value_iteration(mf, game_k12, tol=1e-11)
    greedy = deterministic_policy(vt.greedy(), 13)
    assert np.allclose(vt.v, policy_value_oracle(mf, game_k12, greedy), atol=1e-8)
    # optimality: one more Bellman application changes nothing
    q2 = bellman_operator(vt.q, mf, game_k12)
    feas = game_k12.feasible_mask()
    assert np.max(np.abs(q2[:, feas] - vt.q[:, feas])) < 1e-9
    # no other deterministic policy beats the greedy one anywhere
    other = deterministic_policy(np.minimum(np.arange(13), 2)[None, :].repeat(2, 0), 13)
    assert np.all(policy_value_oracle(mf, game_k12, other) <= vt.v + 1e-8)


def test_value_iteration_infeasible_entries(rng, game_k12):
    vt = value_iteration(random_mean_field(rng, 2, 13), game_k12)
    assert np.all(np.isneginf(vt.q[:, ~game_k12.feasible_mask()]))
    assert np.all(np.isfinite(vt.q[:, game_k12.feasible_mask()]))


def test_value_iteration_raises(rng, game_k12):
    with pytest.raises(ConvergenceError) as err:
        value_iteration(random_mean_field(rng, 2, 13), game_k12, tol=1e-12, max_iter=3)
    assert err.value.residual > 0


def test_stationary_distribution_eigen_oracle(rng, game3u):
    mf = random_mean_field(rng, 3, 41)
    mu = stationary_distribution(mf, game3u, tol=1e-13)
    P = state_chain(mf, game3u)
    w, vecs = np.linalg.eig(P.T)
    v = np.real(vecs[:, np.argmin(np.abs(w - 1.0))])
    v /= v.sum()
    assert np.abs(mu.ravel() - v).sum() < 1e-9


def test_mean_field_flow_preserves_mean_karma(rng, game_k12):
    mf = random_mean_field(rng, 2, 13)
    mu = mean_field_flow(mf, game_k12, steps=200)
    k = np.arange(13)
    assert (mu.sum(0) * k).sum() == pytest.approx((mf.mu.sum(0) * k).sum(), abs=1e-9)
    assert abs(mu.sum() - 1.0) < 1e-12


def test_softmax_response_rows(rng, game_k12):
    vt = value_iteration(random_mean_field(rng, 2, 13), game_k12)
    for tau in (10.0, 1.0, 1e-3):
        pi = softmax_response(vt, tau)
        MeanField(np.full((2, 13), 1 / 26), pi).validate(1e-12)
    cold = softmax_response(vt, 1e-9)
    assert np.array_equal(np.argmax(cold, -1), vt.greedy())
    with pytest.raises(ValueError):
        softmax_response(vt, 0.0)


def test_exploitability(rng, game_k12):
    mf = random_mean_field(rng, 2, 13)
    vt = value_iteration(mf, game_k12, tol=1e-11)
    assert exploitability(vt, deterministic_policy(vt.greedy(), 13)) == pytest.approx(0.0, abs=1e-12)
    uni = uniform_policy(2, 13)
    q = np.where(np.isfinite(vt.q), vt.q, 0.0)
    oracle = max(vt.v[u, k] - np.mean(q[u, k, :k + 1]) for u in range(2) for k in range(13))
    assert exploitability(vt, uni) == pytest.approx(oracle, abs=1e-12)


def test_action_gap_hand_example():
    q = np.full((1, 3, 3), -np.inf)
    q[0, 0, 0] = 1.0
    q[0, 1, :2] = [2.0, 2.5]
    q[0, 2, :] = [0.0, 3.0, 2.0]
    pi = deterministic_policy(np.array([[0, 1, 1]]), 3)
    assert action_gap((q, pi)) == pytest.approx(0.5)
    pi_bad = deterministic_policy(np.array([[0, 0, 1]]), 3)
    assert action_gap((q, pi_bad)) == pytest.approx(-0.5)
    assert math.isinf(action_gap((q[:, :1, :1], pi[:, :1, :1])))


def test_initial_mean_field(game3u):
    mf = initial_mean_field(game3u)
    mf.validate()
    assert np.allclose(mf.mu[:, game3u.avg_karma], game3u.urgency_stationary())


def test_exploit_tolerance(game2u):
    scfg = SneSolverConfig(tol_exploit=None)
    assert scfg.exploit_tolerance(game2u) == pytest.approx(1e-4 * 5.0 / 0.02)


def test_solve_sne_k12(sne_k12, game_k12):
    res = sne_k12
    assert res.converged
    assert res.residual_sne1 <= 1e-8
    assert res.exploitability <= 1e-4
    res.mean_field.validate(1e-10)
    k = np.arange(13)
    assert (res.mean_field.mu.sum(0) * k).sum() == pytest.approx(game_k12.avg_karma, abs=1e-8)
    r1, ex = sne_residuals(res.mean_field, game_k12)
    assert r1 == pytest.approx(res.residual_sne1, abs=1e-12)
    assert ex <= 1e-4


def test_solve_sne_deterministic(sne_k12, game_k12):
    again = solve_sne(game_k12)
    assert np.array_equal(again.mean_field.mu, sne_k12.mean_field.mu)
    assert np.array_equal(again.mean_field.pi, sne_k12.mean_field.pi)


def test_sne_json_roundtrip(tmp_path, sne_k12, game_k12):
    path = tmp_path / "sne.json"
    save_sne(sne_k12, game_k12, path, SneSolverConfig())
    back, cfg = load_sne(path)
    assert cfg.to_dict() == game_k12.to_dict()
    assert np.array_equal(back.mean_field.mu, sne_k12.mean_field.mu)
    assert np.array_equal(back.mean_field.pi, sne_k12.mean_field.pi)
    assert np.array_equal(back.values.q, sne_k12.values.q)
    assert back.action_gap == sne_k12.action_gap and back.converged
