import numpy as np
import pytest

from karma_mfg.game import MeanField, load_instance


def random_policy(rng, n_u, n_k, sparsity=0.0):
    pi = rng.random((n_u, n_k, n_k))
    if sparsity:
        pi *= rng.random(pi.shape) > sparsity
    idx = np.arange(n_k)
    pi *= idx[None, None, :] <= idx[None, :, None]
    pi[..., 0] += 1e-3  # every row keeps some mass
    return pi / pi.sum(axis=-1, keepdims=True)


def random_mean_field(rng, n_u, n_k, max_karma=None):
    mu = rng.random((n_u, n_k))
    if max_karma is not None:
        mu[:, max_karma + 1:] = 0.0
    mu /= mu.sum()
    return MeanField(mu, random_policy(rng, n_u, n_k))


@pytest.fixture(scope="session")
def game2u():
    return load_instance("instance-2u")


@pytest.fixture(scope="session")
def game3u():
    return load_instance("instance-3u")


@pytest.fixture(scope="session")
def game_k12():
    return load_instance("instance-2u-k12")


@pytest.fixture(scope="session")
def sne_k12(game_k12):
    from karma_mfg.sne import solve_sne

    return solve_sne(game_k12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
