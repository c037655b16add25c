import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import silhouette_score

from panelmfm.dgp import DgpConfig, simulate_panel
from panelmfm.model import ModelParams
from panelmfm.postprocess import (Interval, PosteriorSummary, aggregate_mc, format_summary_table,
                                  identify_by_clustering, identify_by_ordering, int_quartiles,
                                  map_estimate, summarize)
from panelmfm.priors import AtomPrior, KPrior, PriorConfig, RegressionPrior, WeightPrior
from panelmfm.sampler import DrawStore, SamplerSettings, run_chain


def make_store(draws, gamma=None, beta=None, dynamic=False):
    """``draws`` holds (alpha, sigma2, weights, kplus) per draw."""
    p = 0 if beta is None else np.atleast_2d(beta).shape[1]
    s = DrawStore(dynamic=dynamic, p=p)
    for d, (a, s2, w, kp) in enumerate(draws):
        s.K.append(len(a))
        s.kplus.append(kp)
        s.alpha.append(np.asarray(a, float))
        s.sigma2.append(np.asarray(s2, float))
        s.weights.append(np.asarray(w, float))
        s.gamma.append(np.nan if gamma is None else float(gamma[d]))
        s.beta.append(np.zeros(0) if beta is None else np.asarray(beta[d], float))
        s.e0.append(1.0)
        s.C0.append(1.0)
        s.loglik.append(0.0)
    return s


def separated_store(n=300, seed=0, noise=0.1):
    centres = (-5.0, 0.0, 5.0)
    rng = np.random.default_rng(seed)
    draws = []
    k = len(centres)
    for _ in range(n):
        p = rng.permutation(k)
        a = np.asarray(centres)[p] + noise * rng.standard_normal(k)
        s2 = (np.array([0.5, 1.0, 2.0]) * np.exp(0.05 * rng.standard_normal(k)))[p]
        w = rng.dirichlet(np.full(k, 50.0))
        draws.append((a, s2, w, k))
    return make_store(draws)


def test_map_examples():
    assert map_estimate([3, 3, 3, 4]) == 3
    assert map_estimate([2, 2, 3, 3]) == 2
    assert map_estimate([5, 1, 5, 1, 7]) == 1
    with pytest.raises(ValueError):
        map_estimate([])


def test_quartiles_of_integer_draws():
    assert int_quartiles([1, 2, 3, 4]) == (1, 3)
    assert int_quartiles([3] * 10) == (3, 3)
    assert int_quartiles([2] * 3 + [3] * 7) == (2, 3)


def test_ordering_example():
    store = make_store([([5.0, -5.0, 0.0, 9.0], [1.0, 2.0, 3.0, 4.0], [0.2, 0.3, 0.4, 0.1], 3)])
    ident = identify_by_ordering(store, 3)
    assert list(ident.alpha[0]) == [-5.0, 0.0, 5.0]
    assert list(ident.sigma2[0]) == [2.0, 3.0, 1.0]
    assert np.allclose(ident.weights[0], np.array([0.3, 0.4, 0.2]) / 0.9)


def test_ordering_ties_keep_original_order():
    store = make_store([([1.0, 1.0, 0.0], [5.0, 6.0, 7.0], [1 / 3] * 3, 3)])
    ident = identify_by_ordering(store, 3)
    assert list(ident.sigma2[0]) == [7.0, 5.0, 6.0]


def test_ordering_without_matching_draws_is_flagged():
    store = make_store([([0.0, 1.0], [1.0, 1.0], [0.5, 0.5], 2)])
    ident = identify_by_ordering(store, 3)
    assert ident.empty and ident.warning


@given(seed=st.integers(0, 2**32 - 1))
def test_ordering_output_is_sorted(seed):
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(20):
        K = int(rng.integers(1, 6))
        kp = int(rng.integers(1, K + 1))
        draws.append((rng.normal(size=K), rng.uniform(0.1, 2, K), rng.dirichlet(np.ones(K)), kp))
    store = make_store(draws)
    for kp in set(store.kplus):
        ident = identify_by_ordering(store, kp)
        assert np.all(np.diff(ident.alpha, axis=1) >= 0)
        assert np.allclose(ident.weights.sum(axis=1), 1.0)


@pytest.mark.parametrize("features", ["alpha", "alpha-logsigma2"])
def test_clustering_matches_ordering_when_separated(features):
    store = separated_store()
    a = identify_by_ordering(store, 3)
    b = identify_by_clustering(store, 3, rng=1, features=features)
    assert b.n_discarded == 0
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.sigma2, b.sigma2)
    assert np.array_equal(a.weights, b.weights)


def test_clustering_single_component_needs_no_relabelling():
    store = make_store([([0.1 * i], [1.0], [1.0], 1) for i in range(10)])
    ident = identify_by_clustering(store, 1, rng=0)
    assert ident.n_discarded == 0 and ident.alpha.shape == (10, 1)


def test_clustering_discards_non_bijective_draws():
    store = separated_store(n=100)
    # two extra draws that put two components in the same cluster
    extra = make_store([([-5.0, -5.1, 5.0], [1.0] * 3, [1 / 3] * 3, 3),
                        ([0.0, 0.1, 5.0], [1.0] * 3, [1 / 3] * 3, 3)])
    for name in ("K", "kplus", "alpha", "sigma2", "weights", "gamma", "beta", "e0", "C0", "loglik"):
        getattr(store, name).extend(getattr(extra, name))
    ident = identify_by_clustering(store, 3, rng=0)
    assert ident.n_discarded == 2 and ident.n_candidates == 102
    assert 100 not in ident.draw_index and 101 not in ident.draw_index


def test_clustering_warns_when_most_draws_discarded():
    rng = np.random.default_rng(0)
    draws = [(rng.normal(size=3), [1.0] * 3, [1 / 3] * 3, 3) for _ in range(200)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ident = identify_by_clustering(make_store(draws), 3, rng=0)
    assert ident.n_discarded > 100
    assert ident.warning and any("discarded" in str(w.message) for w in caught)


def test_summary_of_constant_draws():
    store = make_store([([1.0, 4.0], [0.5, 2.0], [0.25, 0.75], 2)] * 50,
                       gamma=[0.5] * 50, beta=[[0.1]] * 50, dynamic=True)
    s = summarize(store)
    assert s.k_map == 2 and s.kplus_map == 2 and s.kplus_pmf == {2: 1.0}
    assert s.atoms_mean == [(1.0, 0.5), (4.0, 2.0)]
    assert np.allclose(s.weights_mean, [0.25, 0.75])
    assert (s.gamma.mean, s.gamma.lower, s.gamma.upper) == (0.5, 0.5, 0.5)
    assert s.beta[0].lower == s.beta[0].mean == s.beta[0].upper == 0.1
    assert s.cumulative_effect[0].mean == pytest.approx(0.2)
    assert s.cumulative_effect[0].lower == pytest.approx(0.2)


def test_cumulative_effect_is_drawwise():
    rng = np.random.default_rng(4)
    n = 5000
    g = rng.uniform(0.0, 0.9, n)
    b = 0.2 * (1 - g) + 0.01 * rng.standard_normal(n) + 0.3 * g ** 4
    store = make_store([([0.0], [1.0], [1.0], 1)] * n, gamma=g, beta=b[:, None], dynamic=True)
    s = summarize(store)
    drawwise = np.mean(b / (1 - g))
    plugin = b.mean() / (1 - g.mean())
    assert abs(drawwise - plugin) > 0.1 * abs(plugin)
    assert s.cumulative_effect[0].mean == pytest.approx(drawwise, rel=1e-12)
    assert s.cumulative_effect[0].lower <= s.cumulative_effect[0].mean <= s.cumulative_effect[0].upper


@pytest.mark.parametrize("strategy", ["ordering", "clustering"])
def test_summary_ignores_draw_order(strategy):
    rng = np.random.default_rng(6)
    draws = []
    for _ in range(120):
        K = int(rng.integers(2, 5))
        kp = int(rng.integers(1, 3))
        a = np.sort(rng.normal(0, 4, K))
        draws.append((rng.permutation(a), rng.uniform(0.5, 2, K), rng.dirichlet(np.ones(K)), kp))
    n = len(draws)
    store = make_store(draws, beta=rng.normal(size=(n, 2)))
    perm = rng.permutation(n)
    s1 = summarize(store, strategy=strategy, rng=3)
    s2 = summarize(store.subset(perm), strategy=strategy, rng=3)
    assert (s1.k_map, s1.kplus_map, s1.k_quartiles) == (s2.k_map, s2.kplus_map, s2.k_quartiles)
    assert np.allclose(s1.atoms_mean, s2.atoms_mean, atol=1e-12)
    assert np.allclose(s1.weights_mean, s2.weights_mean, atol=1e-12)
    for x, y in zip(s1.beta, s2.beta):
        assert (x.mean, x.lower, x.upper) == pytest.approx((y.mean, y.lower, y.upper), abs=1e-12)


def test_summary_rows_and_table():
    store = make_store([([1.0, 4.0], [0.5, 2.0], [0.25, 0.75], 2)] * 5, gamma=[0.5] * 5,
                       beta=[[0.1]] * 5, dynamic=True)
    s = summarize(store)
    names = [r[0] for r in s.to_rows()]
    assert names.count("alpha") == 2 and "gamma" in names and "cumulative_effect" in names
    text = format_summary_table(s)
    assert "K+ hat: 2" in text and "gamma : 0.50" in text


def test_both_strategies_agree_on_a_separated_posterior():
    tp = ModelParams(beta=[0.0], alpha=[-5.0, 0.0, 5.0], sigma2=[1.0] * 3, weights=[1 / 3] * 3)
    data, _ = simulate_panel(DgpConfig(true_params=tp, N=50, T=3, seed=77))
    pc = PriorConfig(KPrior.bnb(1, 4, 3), WeightPrior("static", 1.0), AtomPrior.from_data(data),
                     RegressionPrior.default(1))
    store = run_chain(data, pc, SamplerSettings(n_iter=1500, n_burnin=200, seed=5))
    a = identify_by_ordering(store, 3)
    b = identify_by_clustering(store, 3, rng=0)
    labels = np.tile(np.arange(3), a.alpha.shape[0])
    assert silhouette_score(a.alpha.reshape(-1, 1), labels) > 0.8
    se = a.alpha.std(axis=0) / np.sqrt(a.alpha.shape[0])
    assert np.all(np.abs(a.alpha.mean(axis=0) - b.alpha.mean(axis=0)) <= 2 * se + 1e-12)


# --- aggregation over replications -------------------------------------------------------

def rep_summary(kplus_map, alphas, gamma=None, beta=0.0, k_map=None):
    k = len(alphas)
    w = np.full(k, 1.0 / k) if k else np.zeros(0)
    iv = lambda m: Interval(m, m - 0.1, m + 0.1)
    return PosteriorSummary(
        n_draws=10, k_map=k_map or kplus_map, kplus_map=kplus_map, k_quartiles=(kplus_map, kplus_map),
        kplus_quartiles=(kplus_map, kplus_map), kplus_pmf={kplus_map: 1.0},
        atoms_mean=[(a, 1.0) for a in alphas], weights_mean=w,
        gamma=None if gamma is None else iv(gamma), beta=[iv(beta)],
        cumulative_effect=[] if gamma is None else [iv(beta / (1 - gamma))])


def test_aggregate_uses_replications_up_to_the_estimate():
    reps = [rep_summary(3, [-5.0, 0.0, 5.0], beta=0.1), rep_summary(3, [-4.8, 0.2, 5.2], beta=0.3),
            rep_summary(2, [-5.0, 5.0], beta=0.2), rep_summary(4, [-5, 0, 5, 9], beta=9.0)]
    agg = aggregate_mc(reps, k_true=3)
    assert agg.kplus_hat == 3 and agg.averaging_set == "le_kplus_hat" and agg.n_averaged == 3
    # the K+=2 replication feeds the outer slots only
    assert agg.atoms_mean[0][0] == pytest.approx((-5.0 - 4.8 - 5.0) / 3)
    assert agg.atoms_mean[1][0] == pytest.approx((0.0 + 0.2) / 2)
    assert agg.atoms_mean[2][0] == pytest.approx((5.0 + 5.2 + 5.0) / 3)
    assert agg.beta[0].mean == pytest.approx(0.2)
    assert agg.weights_mean.sum() == pytest.approx(1.0)


def test_aggregate_falls_back_to_true_count():
    # rounded mean of (2, 4) is 3, which no replication hits
    reps = [rep_summary(2, [-5.0, 5.0]), rep_summary(4, [-6.0, -2.0, 2.0, 6.0])]
    agg = aggregate_mc(reps, k_true=4)
    assert agg.kplus_hat == 3 and agg.averaging_set == "eq_k_true" and agg.n_averaged == 1
    assert [a for a, _ in agg.atoms_mean] == [-6.0, -2.0, 2.0, 6.0]


def test_aggregate_quartiles_and_k_hat():
    reps = [rep_summary(k, list(range(k)), k_map=k + 1) for k in (1, 1, 2, 2, 2, 3)]
    agg = aggregate_mc(reps)
    assert agg.kplus_hat == 2 and agg.kplus_hat_quartiles == (1, 2)
    assert agg.k_hat == 3


def test_aggregate_dynamic_parameters():
    reps = [rep_summary(1, [0.0], gamma=0.1), rep_summary(1, [0.2], gamma=0.3)]
    agg = aggregate_mc(reps)
    assert agg.gamma.mean == pytest.approx(0.2)
    assert agg.gamma.lower == pytest.approx(0.1)
    assert agg.atoms_mean[0][0] == pytest.approx(0.1)
