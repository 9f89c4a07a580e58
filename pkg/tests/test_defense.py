import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from scenarios import clustered_embeddings, flat_layout, lookup_embedder, uploads
from fssl_backdoor.aggregation import ClientUpdate, Upload, fedavg
from fssl_backdoor.core import ParameterVector
from fssl_backdoor.defense import DEFENSE_KINDS, DefenseConfig, ServerContext, make_defense
from fssl_backdoor.defense.baselines import (
    flame,
    flare_trust,
    fltrust,
    foolsgold,
    foolsgold_weights,
    krum,
    mmd_matrix,
    rflbat,
    trimmed_mean,
)
from fssl_backdoor.defense.eminspector import (
    accumulated_similarity,
    accumulated_similarities,
    decision_boundary,
    eminspector,
    eminspector_knowledge_adjusted,
    inspect,
    vote,
)
from fssl_backdoor.errors import ConfigError, DefenseError, LayoutError
from fssl_backdoor.linalg import kmeans, pca


def _random_case(rng, n_max=10, d_max=100, n_min=1):
    n = int(rng.integers(n_min, n_max + 1))
    d = int(rng.integers(1, d_max + 1))
    return rng.normal(size=(n, d)), rng.integers(1, 50, size=n)


# --- fedavg ------------------------------------------------------------------


def test_fedavg_weighted_arithmetic():
    ups = uploads([[0.0, 2.0], [3.0, -1.0]], sizes=[1, 2])
    np.testing.assert_allclose(fedavg(ups).values, [2.0, 0.0], atol=1e-15)


def test_fedavg_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        X, s = _random_case(rng)
        ref = oracles.fedavg(X.tolist(), s.tolist())
        assert np.max(np.abs(fedavg(uploads(X, s)).values - ref)) <= 1e-12


def test_fedavg_rejects_mixed_layouts():
    a = uploads([[1.0, 2.0]])[0]
    b = Upload(1, ParameterVector(np.zeros(3), flat_layout(3)), 1)
    with pytest.raises(LayoutError):
        fedavg([a, b])


def test_client_update_hides_truth():
    u = ClientUpdate(3, ParameterVector(np.zeros(2), flat_layout(2)), 5, True).upload()
    assert not hasattr(u, "is_malicious_truth")


# --- Krum --------------------------------------------------------------------


def test_krum_example_picks_lowest_id_on_tie():
    r = krum(uploads([[0.0], [0.1], [0.2], [10.0]]), 1)
    assert r.info["selected"] == 0
    np.testing.assert_allclose(sorted(r.info["scores"].values()), [0.01, 0.01, 0.01, 96.04], atol=1e-12)


def test_krum_identical_updates():
    assert krum(uploads(np.ones((5, 3))), 1).info["selected"] == 0


def test_krum_never_picks_outlier():
    rng = np.random.default_rng(1)
    for _ in range(20):
        X = rng.normal(0, 0.1, size=(7, 5))
        X[4] += 100
        for C in (1, 2):
            assert krum(uploads(X), C).info["selected"] != 4


def test_krum_matches_oracle_and_validates():
    rng = np.random.default_rng(2)
    for _ in range(50):
        X, _ = _random_case(rng, n_min=5)
        for C in (1, 2):
            assert krum(uploads(X), C).info["selected"] == oracles.krum(X.tolist(), C)
    with pytest.raises(DefenseError):
        krum(uploads(np.ones((3, 2))), 1)


# --- trimmed mean ------------------------------------------------------------


def test_trimmed_mean_examples():
    assert trimmed_mean(uploads([[1.0], [2.0], [3.0], [100.0]]), 1).params.values[0] == 2.5
    X = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(trimmed_mean(uploads(X), 0).params.values, X.mean(0), atol=1e-15)
    with pytest.raises(DefenseError):
        trimmed_mean(uploads(np.ones((4, 2))), 2)


def test_trimmed_mean_matches_oracle():
    X = np.random.default_rng(3).normal(size=(9, 20))
    ref = oracles.trimmed_mean(X.tolist(), 2)
    assert np.max(np.abs(trimmed_mean(uploads(X), 2).params.values - ref)) <= 1e-12


# --- FLTrust -----------------------------------------------------------------


def _pv(v):
    v = np.asarray(v, dtype=float)
    return ParameterVector(v, flat_layout(len(v)))


def test_fltrust_clips_anti_colinear():
    g = _pv([0.0, 0.0])
    r = fltrust(uploads([[1.0, 1.0], [-1.0, -1.0]]), _pv([2.0, 2.0]), g)
    assert r.info["trust"][1] == 0.0 and r.info["trust"][0] == pytest.approx(1.0)
    np.testing.assert_allclose(r.params.values, [2.0, 2.0], atol=1e-12)


def test_fltrust_update_equal_to_server():
    g = _pv([1.0, -1.0, 0.5])
    s = _pv([2.0, 0.0, 0.0])
    r = fltrust(uploads([s.values]), s, g)
    np.testing.assert_allclose(r.params.values, s.values, atol=1e-12)


def test_fltrust_matches_oracle():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(5, 12))
    g, s = rng.normal(size=12), rng.normal(size=12)
    ref = oracles.fltrust(X.tolist(), s.tolist(), g.tolist())
    assert np.max(np.abs(fltrust(uploads(X), _pv(s), _pv(g)).params.values - ref)) <= 1e-10


def test_fltrust_all_zero_trust_keeps_global():
    g = _pv([0.0, 0.0])
    r = fltrust(uploads([[-1.0, 0.0], [0.0, -1.0]]), _pv([1.0, 1.0]), g)
    assert r.info["fallback"] and r.params == g


# --- FoolsGold ---------------------------------------------------------------


def test_foolsgold_identical_histories_get_minimum():
    H = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.2], [0.3, 0.0, 1.0]])
    w = foolsgold_weights(H)
    assert w[0] == w[1] == w.min()


def test_foolsgold_orthogonal_equal():
    w = foolsgold_weights(np.eye(4))
    assert np.allclose(w, w[0])


def test_foolsgold_colluders_downweighted_and_oracle():
    rng = np.random.default_rng(5)
    H = rng.normal(size=(6, 10))
    H[5] = H[4]
    w = foolsgold_weights(H)
    np.testing.assert_allclose(w, oracles.foolsgold(H.tolist()), atol=1e-12)
    assert w[4] < w[:4].mean() and w[5] < w[:4].mean()


def test_foolsgold_history_accumulates():
    hist = {}
    g = _pv([0.0, 0.0])
    foolsgold(uploads([[1.0, 0.0], [0.0, 1.0]]), hist, g)
    foolsgold(uploads([[1.0, 0.0], [0.0, 1.0]]), hist, g)
    np.testing.assert_allclose(hist[0], [2.0, 0.0])


# --- FLAME -------------------------------------------------------------------


def test_flame_identical_no_noise():
    X = np.tile([1.0, 2.0, 3.0], (4, 1))
    r = flame(uploads(X), _pv([0.0, 0.0, 0.0]), np.random.default_rng(0), noise_lambda=0.0)
    np.testing.assert_allclose(r.params.values, X[0], atol=1e-12)


def test_flame_clips_extreme_norm():
    rng = np.random.default_rng(6)
    X = 1.0 + 0.01 * rng.normal(size=(5, 4))
    X[2] *= 1000
    r = flame(uploads(X), _pv(np.zeros(4)), np.random.default_rng(0), 0.0)
    assert max(r.info["clipped_norms"]) <= r.info["clip_bound"] + 1e-12


def test_flame_noise_reproducible():
    X = np.random.default_rng(7).normal(size=(5, 6))
    a = flame(uploads(X), _pv(np.zeros(6)), np.random.default_rng(3), 0.1)
    b = flame(uploads(X), _pv(np.zeros(6)), np.random.default_rng(3), 0.1)
    assert a.params.values.tobytes() == b.params.values.tobytes()


# --- RFLBAT ------------------------------------------------------------------


def test_rflbat_keeps_larger_cluster():
    rng = np.random.default_rng(8)
    X = np.vstack([rng.normal(0, 0.05, size=(5, 6)) + [5, 5, 0, 0, 0, 0],
                   rng.normal(0, 0.05, size=(3, 6)) + [-5, 0, 5, 0, 0, 0]])
    r = rflbat(uploads(X), _pv(np.zeros(6)), seed=0)
    assert r.flagged == {5, 6, 7}


def test_rflbat_identical_all_survive():
    r = rflbat(uploads(np.ones((5, 3))), _pv(np.zeros(3)))
    assert r.flagged == set()


def test_pca_components_orthonormal():
    X = np.random.default_rng(9).normal(size=(30, 8)) * [5, 3, 1, 1, 1, 1, 1, 1]
    _, comps, var, proj = pca(X, 2)
    np.testing.assert_allclose(comps @ comps.T, np.eye(2), atol=1e-8)
    ref = np.linalg.eigvalsh(np.cov(X.T))[::-1][:2]
    np.testing.assert_allclose(var, ref, rtol=1e-6)


def test_kmeans_separates_blobs():
    rng = np.random.default_rng(10)
    X = np.vstack([rng.normal(0, 0.1, (10, 2)), rng.normal(5, 0.1, (10, 2))])
    labels, _, _ = kmeans(X, 2, seed=0)
    assert len(set(labels[:10])) == 1 and len(set(labels[10:])) == 1 and labels[0] != labels[10]


# --- FLARE -------------------------------------------------------------------


def test_mmd_properties():
    rng = np.random.default_rng(11)
    R = rng.normal(size=(4, 6, 3))
    R[1] = R[0]
    M = mmd_matrix(R)
    assert M[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert np.all(M >= 0) and np.allclose(M, M.T)


@pytest.mark.parametrize("seed", range(5))
def test_flare_trusts_central_colluders(seed):
    # benign encoders scatter around shared per-item embeddings; colluders sit close to them
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(20, 16))
    E = base + 0.8 * rng.normal(size=(10, 20, 16))
    bad = [2, 5, 7]
    E[bad] = base + 0.1 * rng.normal(size=(3, 20, 16))
    votes, trust = flare_trust(mmd_matrix(E))
    assert all(votes[c] > votes.mean() for c in bad)
    assert trust[bad].sum() > 3 / 10


# --- EmInspector -------------------------------------------------------------


def test_accumulated_similarity_examples():
    assert np.allclose(accumulated_similarities(np.ones((3, 4))), 2.0)
    assert accumulated_similarity([[1, 0], [0, 1], [-1, 0]], 0) == pytest.approx(-1.0)


def test_accumulated_similarity_matches_double_loop():
    E = np.random.default_rng(12).normal(size=(10, 32))
    d = accumulated_similarities(E)
    ref = [oracles.accumulated(E.tolist(), i) for i in range(10)]
    assert np.max(np.abs(d - ref)) <= 1e-12


def test_zero_norm_embedding_contributes_zero():
    d = accumulated_similarities(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(d, [0.0, 1.0, 1.0])


@pytest.mark.parametrize("ds,expected", [([1, 2, 3], 2.0), ([0, 0, 0, 10], 2.5), ([1, 2, 3, 4], 2.5)])
def test_decision_boundary_examples(ds, expected):
    assert decision_boundary(ds) == expected


def test_two_identical_updates_trigger_fallback():
    E = np.ones((2, 5, 3))
    ups, embed, items = lookup_embedder(E)
    g = ParameterVector(np.array([-1.0]), ups[0].params.layout)
    res = eminspector(ups, items, embed, previous_global=g)
    assert res.flagged == {0, 1} and res.fallback and res.params == g
    with pytest.raises(DefenseError):
        eminspector(ups, items, embed)


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_scenario_matches_brute_force(seed):
    E, bad = clustered_embeddings(seed)
    table = vote(E, list(range(10)))
    ref = oracles.eminspector_scores(E.tolist())
    assert [table.scores[c] for c in range(10)] == ref
    assert table.flagged() == bad


def test_inspect_averages_survivors():
    E, bad = clustered_embeddings(1)
    ups, embed, items = lookup_embedder(E)
    res = inspect(ups, items, embed)
    keep = [u for u in ups if u.client_id not in res.flagged]
    assert res.params == fedavg(keep)


@given(st.integers(0, 10_000), st.integers(2, 10), st.sampled_from(["max", "mean"]))
def test_score_parity_and_boundary_property(seed, n, rule):
    E = np.random.default_rng(seed).normal(size=(n, 7, 5))
    table = vote(E, list(range(n)), rule=rule)
    for c, s in table.scores.items():
        assert abs(s) <= 7 and (s - 7) % 2 == 0
    assert table.recompute_scores() == table.scores
    # the mean-only boundary can flag more than half; its table must not claim otherwise
    table.check_invariants()
    assert table.half_cap == (rule == "max")
    if rule == "max":
        for (_, flagged), ties in zip(table.flag_log, table.tie_log):
            # with two models d_0 == d_1 always, so ties are the only way past half
            assert len(flagged) <= math.ceil(n / 2) + max(0, ties - 1)
            if n > 2:
                assert len(flagged) <= math.ceil(n / 2)


@given(st.integers(0, 10_000), st.integers(3, 10))
def test_max_boundary_flags_a_subset_of_mean_boundary(seed, n):
    E = np.random.default_rng(seed).normal(size=(n, 9, 4))
    strict = vote(E, list(range(n)), rule="max")
    loose = vote(E, list(range(n)), rule="mean")
    assert strict.flagged() <= loose.flagged()
    assert all(strict.scores[c] <= loose.scores[c] for c in range(n))


def test_order_equivariance():
    E, _ = clustered_embeddings(3)
    perm = np.random.default_rng(0).permutation(10)
    a = vote(E, list(range(10)))
    b = vote(E[perm], [int(c) for c in perm])
    assert a.scores == b.scores


def test_knowledge_adjusted_top_fraction():
    E, _ = clustered_embeddings(4)
    ups, embed, items = lookup_embedder(E)
    res = eminspector_knowledge_adjusted(ups, items, embed, 0.1, 0.2)
    assert all(len(f) == 3 for _, f in res.table.flag_log)


def test_knowledge_adjusted_exact_estimate_recovers_planted():
    E, bad = clustered_embeddings(5)
    ups, embed, items = lookup_embedder(E)
    assert eminspector_knowledge_adjusted(ups, items, embed, 0.3, 0.0).flagged == bad


def test_knowledge_adjusted_smaller_pool_on_ties():
    E = np.ones((6, 4, 3))
    ups, embed, items = lookup_embedder(E)
    g = ParameterVector(np.array([0.0]), ups[0].params.layout)
    plain = eminspector(ups, items, embed, g)
    adj = eminspector_knowledge_adjusted(ups, items, embed, 0.2, 0.1, g)
    assert len(adj.flagged) < len(plain.flagged)
    with pytest.raises(DefenseError):
        eminspector_knowledge_adjusted(ups, items, embed, 0.4, 0.2)


# --- Defense dispatch --------------------------------------------------------


@pytest.mark.parametrize("kind", DEFENSE_KINDS)
def test_every_defense_preserves_layout(kind):
    E, _ = clustered_embeddings(6, n_models=6, n_colluders=2)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 4))
    X[:, 0] = np.arange(6)  # parameter 0 selects the model's embedding table

    def embed(params, items):
        return E[int(round(params.values[0])) % 6][np.asarray(items, dtype=int)]

    ups = uploads(X)
    g = ParameterVector(np.zeros(4), ups[0].params.layout)
    ctx = ServerContext(g, embed, 0, np.random.default_rng(1), np.arange(20),
                        server_update=lambda p: p.with_values(p.values + 0.1))
    res = make_defense(kind).aggregate(ups, ctx)
    assert res.params.layout == g.layout
    assert set(res.flagged) <= set(range(6))


def test_defense_rejects_client_updates_with_truth():
    u = ClientUpdate(0, ParameterVector(np.zeros(2), flat_layout(2)), 1, True)
    ctx = ServerContext(u.params, lambda p, x: x)
    with pytest.raises(DefenseError):
        make_defense("fedavg").aggregate([u], ctx)


def test_defense_config_validation():
    with pytest.raises(ConfigError):
        DefenseConfig("median")
    with pytest.raises(ConfigError):
        DefenseConfig("eminspector", {"est_malicious_frac": 0.4, "fluctuation": 0.2})
    with pytest.raises(ConfigError):
        DefenseConfig("krum", {"C": -1})
