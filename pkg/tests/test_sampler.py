import itertools
import pickle

import numpy as np
import pytest
from scipy import special

from conftest import tiny_dataset
from ddprm.data import RatingDataset
from ddprm.model import (ConfigurationError, EmptyNeighborhoodError, local_subset,
                         neighborhood_bounds, pcm_distribution, stick_weights)
from ddprm.priors import HyperParams
from ddprm.sampler import (ChainConfig, SliceSampler, _log_sticks, compute_n_max, escobar_west,
                           make_rng, run_chain, slice_bounds)

CFG = ChainConfig(10, 5, 1, seed=0)


def make_sampler(data=None, mixture="local", hyper=None, config=CFG):
    data = tiny_dataset() if data is None else data
    hyper = HyperParams(a_psi=0.5, b_psi=1.5) if hyper is None else hyper
    return SliceSampler(data, hyper, config, mixture=mixture)


# ------------------------------------------------------------ slice variables
def test_n_max_example():
    assert compute_n_max([0.05, 0.01]) == 4


def test_n_max_boundaries():
    assert compute_n_max([np.exp(-1) * 1.0001]) == 0
    assert compute_n_max([0.5]) == 0
    assert slice_bounds([-3.0]).tolist() == [2]
    with pytest.raises(ValueError):
        compute_n_max([0.0])


def test_slice_u_support_and_mean():
    s = make_sampler(tiny_dataset(n_examinees=20000, seed=1))
    s.state.latents.z[:] = 2
    s.sample_slice_u()
    u = s.state.latents.u
    assert np.all((u > 0) & (u < np.exp(-2)))
    se = np.exp(-2) / np.sqrt(12 * u.size)
    assert abs(u.mean() - np.exp(-2) / 2) < 3 * se
    s.state.latents.z[:] = 4
    s.sample_slice_u()
    assert np.all(s.state.latents.u < np.exp(-4))


# ------------------------------------------------------ augmented likelihood
def _state_for(s, rng, n_max=4):
    st = s.state
    st.theta = rng.normal(size=st.theta.size)
    s._ensure_capacity(40)
    st.sticks[1:] = rng.uniform(0.05, 0.95, size=st.capacity)
    st.atoms[1:] = rng.normal(size=(st.capacity, s.layout.m))
    return st


def test_slice_violation_gives_minus_inf():
    s = make_sampler(tiny_dataset(n_examinees=1))
    z = s.state.latents.z[0]
    s.state.latents.log_u[:] = -z + 0.1
    assert s.joint_augmented_loglik() == -np.inf


def test_singleton_neighborhood_augmented_value():
    data = tiny_dataset(n_examinees=1)
    s = make_sampler(data, hyper=HyperParams(a_gamma=3, b_gamma=3.0001, fixed_psi=0.5))
    s.state.gamma[:] = 3.0
    s.state.latents.z[:] = 3
    s.state.latents.log_u[:] = -3.5
    atom = s.state.atoms[3]
    expected = 3 + np.log(pcm_distribution(s.state.theta[0], atom)[data.rating[0]])
    assert s.joint_augmented_loglik() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_slice_marginalization_identity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    n_items = int(rng.integers(1, n + 1))
    n_ex = int(rng.integers(1, n + 1))
    obs = np.arange(n)
    data = RatingDataset(obs % n_ex, obs % n_items, rng.integers(0, 3, size=n),
                         np.full(n_items, 2))
    hyper = HyperParams(a_gamma=1, b_gamma=10, a_psi=0.5, b_psi=1.5)
    s = make_sampler(data, hyper=hyper)
    st = _state_for(s, rng)
    lo, hi = s.pattern_bounds()
    assert np.all(hi - lo + 1 <= 4)
    g = s.layout.obs_pattern
    target = s.mixture_loglik()
    terms = []
    for z in itertools.product(*[range(lo[g[i]], hi[g[i]] + 1) for i in range(n)]):
        st.latents.z = np.array(z)
        st.latents.log_u = -st.latents.z - 0.3
        # integrating u over its slice contributes exp(-z)
        terms.append(s.joint_augmented_loglik() - float(np.sum(z)))
    assert special.logsumexp(terms) == pytest.approx(target, abs=1e-12)


def test_internal_weights_match_scalar_stick_weights():
    rng = np.random.default_rng(7)
    s = make_sampler()
    st = _state_for(s, rng)
    log_v, cum = _log_sticks(st.sticks)
    sticks = {h: st.sticks[h] for h in range(1, st.capacity + 1)}
    for _ in range(200):
        v = rng.uniform(1, 30)
        psi = rng.uniform(0.5, 5)
        sub = local_subset(v, psi)
        w = stick_weights(sub, sticks).weights
        h = np.array(sub.indices)
        with np.errstate(divide="ignore"):
            got = s._log_weight(h, sub.first, sub.last, log_v, cum)
        np.testing.assert_allclose(np.exp(got), w, atol=1e-12)


# -------------------------------------------------------------- allocations
def test_allocation_frequencies_match_normalized_products():
    n = 100000
    data = RatingDataset(np.arange(n), np.zeros(n, dtype=int), np.full(n, 1), np.array([2]))
    s = make_sampler(data, hyper=HyperParams(a_gamma=2, b_gamma=2.0001, fixed_psi=1.0))
    st = s.state
    st.gamma[:] = 2.0
    st.theta[:] = 0.3
    s._ensure_capacity(6)
    st.sticks[1:4] = [0.3, 0.6, 0.9]
    st.atoms[1:4] = [[0.0, 0.5], [1.0, -1.0], [-0.5, 0.2]]
    lo = np.ones(n, dtype=np.int64)
    hi = np.full(n, 3, dtype=np.int64)
    z = s._draw_allocations(lo, hi, hi, st.theta)
    w = [0.3, 0.7 * 0.6, 0.7 * 0.4]
    prod = np.array([np.exp(h) * pcm_distribution(0.3, st.atoms[h])[1] * w[h - 1]
                     for h in (1, 2, 3)])
    prob = prod / prod.sum()
    freq = np.bincount(z, minlength=4)[1:] / n
    se = np.sqrt(prob * (1 - prob) / n)
    assert np.all(np.abs(freq - prob) < 3 * se)


def test_single_candidate_is_certain():
    s = make_sampler(tiny_dataset(n_examinees=50, seed=3))
    s._ensure_capacity(5)
    lo = np.full(50, 4, dtype=np.int64)
    z = s._draw_allocations(lo, lo, lo + 1, s.state.theta[s.layout.ex_mix])
    assert np.all(z == 4)


def test_allocations_stay_in_slice_and_subset():
    s = make_sampler(tiny_dataset(n_examinees=40, n_items=3, seed=2))
    for _ in range(30):
        s.step()
        st = s.state
        lo, hi = s.pattern_bounds()
        g = s.layout.obs_pattern
        z = st.latents.z
        assert np.all((z >= lo[g]) & (z <= hi[g]))
        assert np.all(st.latents.log_u < -z)


# ------------------------------------------------------- conjugate updates
def test_sigma2_posterior_example():
    s = make_sampler(tiny_dataset(n_examinees=4))
    assert s.sigma2_posterior(np.array([1.0, 1.0, 2.0, 0.0])) == (3.0, 4.0)
    assert s.sigma2_posterior(np.zeros(2)) == (2.0, 1.0)


def test_sigma2_fixed_stays_put():
    s = make_sampler(hyper=HyperParams(fixed_sigma2=1.0, a_psi=0.5, b_psi=1.5))
    for _ in range(5):
        s.step()
    assert s.state.sigma2 == 1.0


def brute_force_counts(z, lo, hi, size, prefix=False):
    first = np.zeros(size, dtype=int)
    later = np.zeros(size, dtype=int)
    for zi, a, b in zip(z, lo, hi):
        for h in range(1, size):
            if zi == h and h != b:
                first[h] += 1
            if zi > h and (prefix or a <= h):
                later[h] += 1
    return first, later


def test_stick_count_example():
    n = 5
    data = RatingDataset(np.arange(n), np.zeros(n, dtype=int), np.zeros(n, dtype=int),
                         np.array([2]))
    s = make_sampler(data, hyper=HyperParams(a_gamma=4, b_gamma=4.0001, fixed_psi=1.0))
    s.state.gamma[:] = 4.0
    s.state.latents.z = np.array([3, 3, 4, 3, 5])
    first, later = s.stick_counts()
    assert (first[3], later[3]) == (3, 2)
    # an observation sitting at the top of its subset counts for neither
    assert first[5] == 0


@pytest.mark.parametrize("prefix", [False, True])
def test_stick_counts_brute_force(prefix):
    rng = np.random.default_rng(11)
    config = ChainConfig(10, 5, allocation_target="prefix" if prefix else "local")
    s = make_sampler(tiny_dataset(n_examinees=8, n_items=3, seed=4),
                     hyper=HyperParams(a_gamma=1, b_gamma=12, a_psi=0.5, b_psi=4),
                     config=config)
    st = s.state
    s._ensure_capacity(40)
    g = s.layout.obs_pattern
    for _ in range(1000):
        st.gamma = rng.uniform(1, 12, size=st.gamma.size)
        st.psi = rng.uniform(0.5, 4, size=st.psi.size)
        lo, hi = s.pattern_bounds()
        st.latents.z = rng.integers(lo[g], hi[g] + 1)
        first, later = s.stick_counts()
        f2, l2 = brute_force_counts(st.latents.z, lo[g], hi[g], first.size, prefix)
        assert np.array_equal(first, f2) and np.array_equal(later, l2)


def test_escobar_west_example():
    draw = escobar_west(1.0, 1.0, 3, 100, 0.5, 0.5)
    assert draw.rate == pytest.approx(1.693147181, abs=1e-9)
    assert draw.odds == pytest.approx(0.01771848327, abs=1e-10)
    assert draw.odds / (1 + draw.odds) == pytest.approx(0.0174100044, abs=1e-10)
    assert draw.shape == 3.0


def test_escobar_west_low_u_keeps_shape():
    draw = escobar_west(1.0, 1.0, 1, 50, 0.4, 0.001)
    assert draw.shape == 2.0


def test_fixed_blocks_do_not_move():
    hyper = HyperParams(fixed_alpha=1.0, fixed_psi=2.0)
    s = make_sampler(tiny_dataset(n_examinees=10, n_items=2), hyper=hyper)
    for _ in range(20):
        s.step()
    assert s.state.alpha == 1.0
    assert np.all(s.state.psi == 2.0)


def test_idle_atoms_refreshed_from_prior():
    hyper = HyperParams(tau_var=3.0, a_psi=0.5, b_psi=1.5)
    s = make_sampler(tiny_dataset(n_examinees=1), hyper=hyper)
    s._ensure_capacity(4000)
    s.sample_tau()
    idle = np.setdiff1d(np.arange(1, s.state.capacity + 1), s.state.latents.z)
    cov = np.cov(s.state.atoms[idle].T)
    np.testing.assert_allclose(cov, 3.0 * np.eye(2), atol=0.35)


# -------------------------------------------------------------------- MH
def test_gamma_proposal_outside_support_rejected():
    s = make_sampler(hyper=HyperParams(a_gamma=1, b_gamma=1.5, a_psi=0.5, b_psi=1.5))
    s.proposals["gamma"].log_scale[:] = np.log(50.0)
    before = s.state.gamma.copy()
    acc = s.sample_gamma()
    moved = s.state.gamma != before
    assert np.all(moved == acc)
    assert np.all((s.state.gamma >= 1) & (s.state.gamma <= 1.5))


def test_psi_shrink_excluding_allocation_rejected():
    s = make_sampler(tiny_dataset(n_examinees=1),
                     hyper=HyperParams(a_gamma=5, b_gamma=5.0001, a_psi=0.5, b_psi=3))
    st = s.state
    st.gamma[:] = 5.0
    st.psi[:] = 2.0
    s._ensure_capacity(8)
    st.latents.z[:] = 7
    st.latents.log_u[:] = -7.5
    lo, hi = s.pattern_bounds()
    assert lo[0] <= 7 <= hi[0]
    log_v, cum = _log_sticks(st.sticks)
    lo_n, hi_n = neighborhood_bounds(5.0, 1.5)
    # shrinking to 1.5 gives {4, 5, 6}, which drops the allocated address
    w = s._allocation_log_weights(np.array([7]), lo_n, hi_n, log_v, cum)
    assert w[0] == -np.inf


def test_psi_ratio_matches_product_of_weights():
    rng = np.random.default_rng(5)
    data = tiny_dataset(n_examinees=6, n_items=1, seed=9)
    s = make_sampler(data, hyper=HyperParams(a_gamma=6, b_gamma=6.0001, a_psi=0.5, b_psi=4))
    st = s.state
    st.gamma[:] = 6.0
    st.psi[:] = 1.2
    s._ensure_capacity(12)
    st.sticks[1:] = rng.uniform(0.1, 0.9, size=st.capacity)
    st.latents.z = np.array([5, 6, 6, 7, 5, 6])
    sticks = {h: st.sticks[h] for h in range(1, st.capacity + 1)}

    def log_prod(psi):
        sub = local_subset(6.0, psi)
        w = dict(zip(sub.indices, stick_weights(sub, sticks).weights))
        return sum(np.log(w[z]) for z in st.latents.z)

    log_v, cum = _log_sticks(st.sticks)
    pg, ph, pc = s._allocation_pairs()
    ratios = []
    for psi in (1.2, 2.7):
        lo, hi = neighborhood_bounds(6.0, psi)
        ratios.append(float(pc @ s._allocation_log_weights(ph, lo, hi, log_v, cum)))
    assert ratios[1] - ratios[0] == pytest.approx(log_prod(2.7) - log_prod(1.2), abs=1e-12)


def test_theta_moves_up_for_top_ratings():
    n = 30
    data = RatingDataset(np.zeros(n, dtype=int), np.arange(n), np.full(n, 2), np.full(n, 2))
    s = make_sampler(data, mixture="none", hyper=HyperParams(fixed_sigma2=4.0))
    s.state.fixed_tau[:] = -1.0
    for _ in range(300):
        s.sample_theta()
    assert s.state.theta[0] > 1.0


def test_atoms_move_up_when_all_ratings_zero():
    n = 200
    data = RatingDataset(np.arange(n), np.zeros(n, dtype=int), np.zeros(n, dtype=int),
                         np.array([2]))
    s = make_sampler(data, mixture="global", hyper=HyperParams(fixed_alpha=1e-3))
    s.state.latents.z[:] = 1
    s.state.atoms[1] = 0.0
    for _ in range(400):
        s.sample_tau()
    assert s.state.atoms[1].sum() > 1.0


# ------------------------------------------------------------ chain runner
def test_run_chain_bookkeeping_and_determinism(tmp_path):
    data = tiny_dataset(n_examinees=15, n_items=3, seed=6)
    hyper = HyperParams(a_psi=0.5, b_psi=3)
    a = run_chain(data, hyper, ChainConfig(10, 5, 1, seed=3))
    b = run_chain(data, hyper, ChainConfig(10, 5, 1, seed=3))
    assert len(a) == 5
    assert a.iterations.tolist() == [6, 7, 8, 9, 10]
    a.save(tmp_path / "a.npz")
    b.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_saved_count_for_long_settings():
    assert ChainConfig(200000, 100000, 5).n_saved == 20000


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    data = tiny_dataset(n_examinees=12, n_items=2, seed=8)
    hyper = HyperParams(a_psi=0.5, b_psi=3)
    ck = tmp_path / "ck.pkl"
    full = run_chain(data, hyper, ChainConfig(30, 10, 2, seed=1))
    run_chain(data, hyper, ChainConfig(20, 10, 2, seed=1, checkpoint_every=20,
                                       checkpoint_path=str(ck)))
    resumed = run_chain(data, hyper, ChainConfig(30, 10, 2, seed=1), resume=str(ck))
    np.testing.assert_array_equal(full.theta, resumed.theta)
    np.testing.assert_array_equal(full.z, resumed.z)


def test_chain_streams_differ_by_id():
    assert make_rng(1, 0).random() != make_rng(1, 1).random()
    assert make_rng(1, 2).random() == make_rng(1, 2).random()


@pytest.mark.parametrize("mixture", ["local", "global", "none"])
def test_all_mixture_modes_run(mixture):
    data = tiny_dataset(n_examinees=20, n_items=3, seed=2)
    archive = run_chain(data, HyperParams(a_psi=0.5, b_psi=3), ChainConfig(20, 10, 1),
                        mixture=mixture)
    assert len(archive) == 10
    assert np.all(np.isfinite(archive.loglik))
    w = archive.mix_weights.sum(axis=2)
    if mixture != "none":
        np.testing.assert_allclose(w, 1.0, atol=1e-9)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ChainConfig(10, 10)
    with pytest.raises(ConfigurationError):
        ChainConfig(10, 5, thin=0)
    with pytest.raises(ConfigurationError):
        ChainConfig(10, 5, allocation_target="other")
    with pytest.raises(ConfigurationError):
        make_sampler(mixture="other")


def test_empty_neighborhood_reported():
    data = tiny_dataset(n_examinees=2)
    with pytest.raises(EmptyNeighborhoodError):
        SliceSampler(data, HyperParams(a_gamma=0.1, b_gamma=0.2, fixed_psi=0.5), CFG)


def test_mixed_items_must_share_categories():
    data = RatingDataset(np.array([0, 0]), np.array([0, 1]), np.array([1, 2]), np.array([1, 2]))
    with pytest.raises(ConfigurationError):
        SliceSampler(data, HyperParams(), CFG)
    SliceSampler(data, HyperParams(mixed_items=(2,)), CFG)


def test_state_dict_pickles():
    s = make_sampler()
    s.step()
    blob = pickle.dumps(s.state_dict())
    t = make_sampler()
    t.load_state_dict(pickle.loads(blob))
    s.step()
    t.step()
    np.testing.assert_array_equal(s.state.theta, t.state.theta)
