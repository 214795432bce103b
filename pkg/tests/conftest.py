import numpy as np
import pytest

from ddprm.data import RatingDataset
from ddprm.priors import HyperParams
from ddprm.sampler import ChainConfig, run_chain
from ddprm.simulate import designated_items, generate, dif_sim_config


def tiny_dataset(n_examinees=3, n_items=1, seed=0, m=2):
    rng = np.random.default_rng(seed)
    ex = np.repeat(np.arange(n_examinees), n_items)
    it = np.tile(np.arange(n_items), n_examinees)
    y = rng.integers(0, m + 1, size=ex.size)
    return RatingDataset(ex, it, y, np.full(n_items, m))


@pytest.fixture(scope="session")
def sim_small():
    return generate(dif_sim_config(120, 4, seed=11))


@pytest.fixture(scope="session")
def small_archive(sim_small):
    data, _ = sim_small
    hyper = HyperParams(fixed_psi=5, mixed_items=designated_items(4))
    return run_chain(data, hyper, ChainConfig(300, 100, 2, seed=5))


def make_archive(theta, obs_tau, rating, examinee=None, item=None, item_max=None,
                 weights=None, atoms=None):
    """Hand-built archive in which every observation has mixed thresholds."""
    from ddprm.archive import PosteriorArchive

    theta = np.asarray(theta, dtype=float)
    obs_tau = np.asarray(obs_tau, dtype=float)
    S, n, m = obs_tau.shape
    rating = np.asarray(rating)
    examinee = np.arange(n) if examinee is None else np.asarray(examinee)
    item = np.zeros(n, dtype=int) if item is None else np.asarray(item)
    J = int(item.max()) + 1
    item_max = np.full(J, m) if item_max is None else np.asarray(item_max)
    if weights is None:
        weights = np.ones((S, 1, 1))
        atoms = obs_tau[:, :1, None, :]
    patterns = np.eye(J)
    return PosteriorArchive(
        iterations=np.arange(1, S + 1), theta=theta, sigma2=np.ones(S), alpha=np.ones(S),
        gamma=np.ones((S, J)), psi=np.ones((S, J)), fixed_tau=np.full((S, J, m), np.nan),
        z=np.ones((S, n), dtype=np.int32), obs_tau=obs_tau, y_rep=np.zeros((S, n), np.int8),
        loglik=np.zeros(S), d_trace=np.zeros(S), mix_lo=np.ones((S, J), dtype=np.int64),
        mix_weights=np.asarray(weights, dtype=float), mix_atoms=np.asarray(atoms, dtype=float),
        examinee=examinee, item=item, rating=rating, item_max=item_max,
        mixed_obs=np.arange(n), obs_pattern=item.copy(), patterns=patterns,
        metadata={"mixture": "local"})


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
