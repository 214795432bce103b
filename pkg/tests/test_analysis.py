import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import make_archive
from ddprm import analysis
from ddprm.analysis import (DensityEstimate, batch_means_mcci, export_traces, find_modes, kde,
                            mixing_density, predictive_mean_var, predictive_moments,
                            predictive_pmf, read_traces, summarize)
from ddprm.model import pcm_distribution, pcm_mean_var


def toy():
    theta = [[0.5, -1.0], [1.5, 0.0], [-0.2, 0.7]]
    obs_tau = [[[0.0, 1.0], [-0.5, 0.2]], [[0.3, 0.3], [1.0, -1.0]], [[-1.0, 2.0], [0.0, 0.0]]]
    return make_archive(theta, obs_tau, rating=[1, 2])


def test_single_state_equals_kernel_moments():
    a = make_archive([[0.4]], [[[0.1, -0.3]]], rating=[0])
    E, V = predictive_mean_var(a, 0)
    m, v = pcm_mean_var(0.4, [0.1, -0.3])
    assert E == pytest.approx(m, abs=1e-15) and V == pytest.approx(v, abs=1e-15)


def test_identical_states_have_no_between_term():
    a = make_archive([[0.4], [0.4]], [[[0.1, -0.3]], [[0.1, -0.3]]], rating=[0])
    E, V = predictive_mean_var(a, 0)
    assert V == pytest.approx(pcm_mean_var(0.4, [0.1, -0.3])[1], abs=1e-15)


def test_three_state_decomposition():
    a = toy()
    for i in range(2):
        means, variances = zip(*(pcm_mean_var(a.theta[s, i], a.obs_tau[s, i]) for s in range(3)))
        E = sum(means) / 3
        V = sum(variances) / 3 + sum((m - E) ** 2 for m in means) / 3
        got = predictive_mean_var(a, i)
        assert got[0] == pytest.approx(E, abs=1e-14) and got[1] == pytest.approx(V, abs=1e-14)


def test_predictive_moments_brute_force_enumeration():
    rng = np.random.default_rng(2)
    S, n = 7, 5
    a = make_archive(rng.normal(size=(S, n)), rng.normal(size=(S, n, 3)),
                     rating=rng.integers(0, 4, size=n))
    E, V = predictive_moments(a)
    for i in range(n):
        # joint pmf over (state, category), then plain first and second moments
        probs = np.array([pcm_distribution(a.theta[s, i], a.obs_tau[s, i]) for s in range(S)]) / S
        k = np.arange(4)
        mean = (probs * k).sum()
        var = (probs * k**2).sum() - mean**2
        assert E[i] == pytest.approx(mean, abs=1e-12) and V[i] == pytest.approx(var, abs=1e-12)
        assert predictive_mean_var(a, i) == pytest.approx((E[i], V[i]), abs=1e-12)


def test_predictive_errors():
    a = toy()
    with pytest.raises(IndexError):
        predictive_mean_var(a, 5)
    empty = make_archive(np.zeros((0, 1)), np.zeros((0, 1, 2)), rating=[0])
    with pytest.raises(ValueError):
        predictive_mean_var(empty, 0)


def test_pmf_single_state_singleton():
    a = make_archive([[0.0]], [[[0.4, -0.2]]], rating=[1])
    np.testing.assert_allclose(predictive_pmf(a, item=1, theta=0.7),
                               pcm_distribution(0.7, [0.4, -0.2]), atol=1e-15)


def test_pmf_two_state_average():
    weights = np.array([[[0.25, 0.75]], [[1.0, 0.0]]])
    atoms = np.array([[[[0.0, 0.0], [1.0, 1.0]]], [[[-1.0, 0.5], [0.0, 0.0]]]])
    a = make_archive(np.zeros((2, 1)), np.zeros((2, 1, 2)), rating=[0], weights=weights,
                     atoms=atoms)
    expected = 0.5 * (0.25 * pcm_distribution(0.3, [0, 0]) + 0.75 * pcm_distribution(0.3, [1, 1])
                      + pcm_distribution(0.3, [-1, 0.5]))
    np.testing.assert_allclose(predictive_pmf(a, x=[1.0], theta=0.3), expected, atol=1e-15)


def test_pmf_integrated_sums_to_one(small_archive):
    for j in (2, 4, 1):
        p = predictive_pmf(small_archive, item=j)
        assert abs(p.sum() - 1) < 1e-10 and np.all(p >= 0)
    with pytest.raises(KeyError):
        predictive_pmf(small_archive, x=[9.0, 9.0, 9.0, 9.0])


def test_degenerate_trace_single_mode():
    a = make_archive(np.zeros((50, 3)), np.full((50, 3, 2), 0.7), rating=[0, 1, 2])
    d = mixing_density(a, item=1, threshold=1)
    assert len(d.modes) == 1
    assert d.modes[0][0] == pytest.approx(0.7, abs=d.grid[1] - d.grid[0])


def test_two_point_masses_two_modes():
    tau = np.zeros((100, 4, 2))
    tau[:, 2:, 1] = 2.0
    tau += np.random.default_rng(0).normal(scale=1e-3, size=tau.shape)
    a = make_archive(np.zeros((100, 4)), tau, rating=[0, 1, 2, 1])
    d = mixing_density(a, item=1, threshold=2)
    locs = sorted(m for m, _ in d.modes)
    assert len(locs) == 2
    assert locs[0] == pytest.approx(0.0, abs=0.05) and locs[1] == pytest.approx(2.0, abs=0.05)


def test_mixing_density_errors(small_archive):
    with pytest.raises(ValueError):
        mixing_density(small_archive, item=1, threshold=1)
    with pytest.raises(IndexError):
        mixing_density(small_archive, item=2, threshold=3)


def _grid_density(fn):
    grid = np.linspace(-4, 6, 1001)
    return DensityEstimate(grid, fn(grid), 0.1)


def test_find_modes_examples():
    one = find_modes(_grid_density(lambda g: stats.norm.pdf(g, 1.0, 0.5)))
    assert len(one) == 1 and one[0][0] == pytest.approx(1.0, abs=0.01)
    two = find_modes(_grid_density(lambda g: 0.5 * stats.norm.pdf(g, 0, 0.2)
                                   + 0.5 * stats.norm.pdf(g, 2, 0.2)))
    assert sorted(round(m, 2) for m, _ in two) == [0.0, 2.0]
    assert find_modes(_grid_density(lambda g: np.ones_like(g))) == []


def test_modes_sorted_by_height():
    d = _grid_density(lambda g: 0.3 * stats.norm.pdf(g, 0, 0.3) + 0.7 * stats.norm.pdf(g, 3, 0.3))
    modes = find_modes(d)
    assert modes[0][0] == pytest.approx(3.0, abs=0.01)
    assert modes[0][1] > modes[1][1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=60),
       st.floats(0, 1), st.floats(0, 1))
def test_mode_count_monotone_in_floor(values, f1, f2):
    d = kde(values)
    lo, hi = sorted((f1, f2))
    assert len(find_modes(d, hi)) <= len(find_modes(d, lo))
    assert np.all(d.density >= 0)
    assert abs(d.integral() - 1) < 1e-3


def test_summarize_examples():
    a = make_archive(np.full((5, 1), 2.5), np.zeros((5, 1, 2)), rating=[0])
    s = summarize(a, "theta[1]")
    assert s["mean"] == 2.5 and s["sd"] == 0
    a = make_archive(np.array([[0.0], [1.0]]), np.zeros((2, 1, 2)), rating=[0])
    s = summarize(a, "theta[1]")
    assert s["mean"] == 0.5 and s["sd"] == 0.5
    vals = np.array([1.0, 4.0, 2.0, 8.0, 5.0])
    a = make_archive(vals[:, None], np.zeros((5, 1, 2)), rating=[0])
    s = summarize(a, "theta[1]")
    assert s["mean"] == pytest.approx(4.0) and s["sd"] == pytest.approx(np.sqrt(6.0))
    assert s["median"] == 4.0
    assert s["quantiles"]["0.25"] == 2.0 and s["quantiles"]["0.75"] == 5.0


@pytest.mark.parametrize("selector", ["theta[9]", "beta", "tau[1]", "gamma[x]", "tau[1,3]"])
def test_unknown_selector(selector):
    with pytest.raises(KeyError):
        summarize(toy(), selector)


def test_selectors_resolve(small_archive):
    for sel in ("sigma2", "alpha", "gamma[2]", "psi[1]", "tau[1,2]", "tau[4,1]", "loglik", "d"):
        assert analysis.resolve_trace(small_archive, sel).shape == (len(small_archive),)
    np.testing.assert_array_equal(analysis.resolve_trace(small_archive, "tau[1,2]"),
                                  small_archive.fixed_tau[:, 0, 1])


def test_batch_means():
    assert batch_means_mcci(np.full(400, 3.0)) == 0.0
    x = np.random.default_rng(4).standard_normal(10000)
    hw = batch_means_mcci(x)
    assert 0.0196 / 1.3 < hw < 0.0196 * 1.3
    with pytest.raises(ValueError):
        batch_means_mcci(np.zeros(99))


def test_batch_means_arithmetic():
    x = np.arange(100.0)
    means = x.reshape(10, 10).mean(axis=1)
    expected = stats.t.ppf(0.975, 9) * means.std(ddof=1) / np.sqrt(10)
    assert batch_means_mcci(x) == pytest.approx(expected, abs=1e-12)


def test_export_traces(tmp_path):
    rng = np.random.default_rng(1)
    a = make_archive(rng.normal(size=(5, 3)) / 3, np.zeros((5, 3, 2)), rating=[0, 1, 2])
    path = export_traces(a, "theta[3]", tmp_path / "t.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iteration", "theta[3]"] and len(rows) == 6
    back = read_traces(path)
    np.testing.assert_array_equal(back["theta[3]"], a.theta[:, 2])
    with pytest.raises(OSError):
        export_traces(a, "theta[1]", tmp_path / "missing" / "t.csv")


def test_summary_document(small_archive):
    doc = analysis.summary_document(small_archive)
    assert set(doc["parameters"]) >= {"sigma2", "alpha", "gamma[1]", "psi[1]"}
    mixed = [r for r in doc["thresholds"] if r["mixed"]]
    assert {r["item"] for r in mixed} == {2, 4}
    assert all(r["modes"] for r in mixed)
