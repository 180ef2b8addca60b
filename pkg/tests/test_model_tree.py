"""Tree selection, importance reweighting, prediction, and model comparison."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from choicetree.choice import EvidenceEstimate, build_design, choice_prob
from choicetree.data import binarize, build_requirements, discretize
from choicetree.model_tree import (
    CompositionError,
    ModelTree,
    TreePosterior,
    compose,
    consider_flags,
    evidence_of_tree_model,
    fit_baseline,
    fit_tree,
    normalize_log_weights,
    posterior_model_prob,
    predict,
    read_posterior,
    reweight_trees,
    select_tree_indices,
    select_trees,
    tree_log_weights,
    write_posterior,
)
from choicetree.mining import mine_conjunctions
from choicetree.rulelist import (
    RuleList,
    RuleListPrior,
    TreeSample,
    assign_nodes,
    log_marginal_labels,
    log_prior,
)
from choicetree.synth import bicycle_bins, bicycle_dgp, bicycle_utility, generate


@pytest.fixture(scope="module")
def bike():
    spec = bicycle_dgp(n=300, seed=42)
    ds, truth = generate(spec)
    return ds, spec


def fake_evidence(names, draws, log_ev=0.0, weights=None):
    n = len(draws)
    w = np.full(n, 1.0 / n) if weights is None else weights / weights.sum()
    return EvidenceEstimate(log_ev, 0.01, np.asarray(draws, float), w, 1.0 / np.sum(w ** 2), tuple(names),
                            np.asarray(draws, float)[0])


def random_tree(ds, rl, flags, n_draws, rng, **kw):
    spec = bicycle_utility()
    nodes = assign_nodes(rl, binarize(ds, bicycle_bins()))
    names = build_design(ds, spec, nodes, flags).names
    draws = rng.normal(0, 0.7, size=(n_draws, len(names)))
    return ModelTree(rl, tuple(flags), fake_evidence(names, draws, weights=rng.random(n_draws)), **kw)


def brute_force_predict(tp, ds):
    """Trees x draws x alternatives, utilities rebuilt term by term from coefficient names."""
    X = binarize(ds, tp.bins)
    gated = ds.schema.alt_index(tp.spec.gated)
    out = np.zeros((ds.n_obs, ds.n_alts))
    for tree, w_tree in zip(tp.trees, tp.weights):
        names = list(tree.evidence.names)
        slot = {}
        for nm in names:
            if nm.startswith("eta[node "):
                slot[int(nm[len("eta[node "):-1])] = names.index(nm)
        nodes = assign_nodes(tree.rule_list, X)
        for theta, w_draw in zip(tree.evidence.draws, tree.evidence.weights):
            for i in range(ds.n_obs):
                V = [0.0] * ds.n_alts
                for t in tp.spec.terms:
                    j = ds.schema.alt_index(t.alt)
                    c = theta[names.index(t.coef)]
                    if t.column is None:
                        V[j] += c
                    else:
                        x = ds.column(t.column)
                        V[j] += c * (x[i] if x.ndim == 1 else x[i, j])
                k = int(nodes[i])
                if tree.flags[k]:
                    V[gated] += math.exp(theta[names.index("log_sigma_bike")]) * theta[slot[k]]
                e = [math.exp(v) if ds.available[i, j] and (j != gated or tree.flags[k]) else 0.0
                     for j, v in enumerate(V)]
                s = sum(e)
                for j in range(ds.n_alts):
                    out[i, j] += w_tree * w_draw * e[j] / s
    return out


def three_tree_fixture(ds, rng, n_draws=50):
    reqs = build_requirements(bicycle_bins())
    lists = [
        RuleList.from_labels(["distance:(4.37,inf)"], reqs),
        RuleList.from_labels(["distance:(4.37,inf)", "kids:[0,1] & bike_lanes:(0.11,inf)"], reqs),
        RuleList.from_labels([], reqs),
    ]
    flags = [(False, True), (False, True, True), (True,)]
    trees = [random_tree(ds, rl, f, n_draws, rng) for rl, f in zip(lists, flags)]
    w = rng.random(3)
    return TreePosterior(tuple(trees), w / w.sum(), bicycle_utility(), bicycle_bins())


class TestPredict:
    def test_matches_triple_loop(self, bike):
        ds = bike[0].subset(np.arange(40))
        tp = three_tree_fixture(ds, np.random.default_rng(0))
        got = predict(tp, ds)
        np.testing.assert_allclose(got, brute_force_predict(tp, ds), atol=1e-12, rtol=0)
        np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)

    def test_one_tree_one_draw_equals_choice_prob(self, bike):
        ds = bike[0].subset(np.arange(30))
        reqs = build_requirements(bicycle_bins())
        rl = RuleList.from_labels(["distance:[0,1.17]"], reqs)
        tree = random_tree(ds, rl, (True, True), 1, np.random.default_rng(1))
        tp = TreePosterior((tree,), np.ones(1), bicycle_utility(), bicycle_bins())
        d = tree.design(ds, bicycle_utility(), bicycle_bins())
        np.testing.assert_allclose(predict(tp, ds), choice_prob(tree.evidence.draws[0], d), atol=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(w=st.floats(0, 1))
    def test_linear_in_tree_weights(self, bike, w):
        ds = bike[0].subset(np.arange(25))
        tp = three_tree_fixture(ds, np.random.default_rng(2), n_draws=5)
        a = TreePosterior(tp.trees[:1], np.ones(1), tp.spec, tp.bins)
        b = TreePosterior(tp.trees[1:2], np.ones(1), tp.spec, tp.bins)
        mix = TreePosterior(tp.trees[:2], np.array([w, 1 - w]), tp.spec, tp.bins)
        np.testing.assert_allclose(predict(mix, ds), w * predict(a, ds) + (1 - w) * predict(b, ds), atol=1e-13)

    def test_constant_per_tree_probabilities(self, bike):
        ds = bike[0].subset(np.arange(10))
        tp = three_tree_fixture(ds, np.random.default_rng(3), n_draws=3)
        p = predict(TreePosterior(tp.trees[:1], np.ones(1), tp.spec, tp.bins), ds)
        q = predict(TreePosterior(tp.trees[1:2], np.ones(1), tp.spec, tp.bins), ds)
        mix = TreePosterior(tp.trees[:2], np.array([0.3, 0.7]), tp.spec, tp.bins)
        np.testing.assert_allclose(predict(mix, ds), 0.3 * p + 0.7 * q, atol=1e-14)


class TestTreePosterior:
    def test_weights_validated(self, bike):
        ds = bike[0].subset(np.arange(10))
        tp = three_tree_fixture(ds, np.random.default_rng(0), n_draws=2)
        with pytest.raises(CompositionError):
            TreePosterior(tp.trees, np.array([0.5, 0.5, 0.1]), tp.spec, tp.bins)
        with pytest.raises(CompositionError):
            TreePosterior(tp.trees, np.array([1.5, -0.5, 0.0]), tp.spec, tp.bins)

    def test_round_trip(self, bike, tmp_path):
        ds = bike[0].subset(np.arange(10))
        tp = three_tree_fixture(ds, np.random.default_rng(0), n_draws=4)
        p = tmp_path / "post.json"
        write_posterior(tp, p)
        back = read_posterior(p)
        np.testing.assert_array_equal(back.weights, tp.weights)
        np.testing.assert_array_equal(predict(back, ds), predict(tp, ds))
        assert [t.rule_list for t in back.trees] == [t.rule_list for t in tp.trees]


class TestReweight:
    def _tree(self, log_ev, log_lik, count, log_prior=0.0):
        ev = fake_evidence(["asc"], np.zeros((1, 1)), log_ev)
        return ModelTree(RuleList(()), (True,), ev, count, log_prior, log_lik)

    def test_single_tree(self):
        tp = reweight_trees([self._tree(-10.0, -3.0, 4)], bicycle_utility(), bicycle_bins())
        np.testing.assert_array_equal(tp.weights, [1.0])

    def test_symmetric_pair(self):
        t = [self._tree(-10.0, -3.0, 4), self._tree(-10.0, -3.0, 4)]
        np.testing.assert_allclose(reweight_trees(t, bicycle_utility(), ()).weights, [0.5, 0.5], atol=1e-15)

    def test_hand_normalised(self):
        trees = [self._tree(-100.0, -20.0, 5, -3.0), self._tree(-98.5, -21.0, 2, -4.0), self._tree(-101.0, -19.0, 9, -2.0)]
        raw = [-100 + 20 + math.log(5), -98.5 + 21 + math.log(2), -101 + 19 + math.log(9)]
        ref = np.exp(np.array(raw) - max(raw))
        ref /= ref.sum()
        np.testing.assert_allclose(tree_log_weights(trees), raw, atol=1e-12)
        np.testing.assert_allclose(reweight_trees(trees, bicycle_utility(), ()).weights, ref, atol=1e-14)

    def test_all_impossible(self):
        trees = [self._tree(-math.inf, -3.0, 1), self._tree(-math.inf, -2.0, 1)]
        with pytest.raises(CompositionError):
            reweight_trees(trees, bicycle_utility(), ())

    @settings(max_examples=50, deadline=None)
    @given(lw=st.lists(st.floats(-50, 50), min_size=1, max_size=8), c=st.floats(-1e3, 1e3))
    def test_shift_invariance(self, lw, c):
        a = normalize_log_weights(lw)
        np.testing.assert_allclose(a, normalize_log_weights(np.array(lw) + c), atol=1e-12)
        assert abs(a.sum() - 1.0) < 1e-12


class TestComparison:
    def test_equal_evidence(self):
        assert posterior_model_prob(-5.0, -5.0) == 0.5

    def test_thousand_to_one(self):
        assert posterior_model_prob(math.log(1000.0) - 7.0, -7.0) == pytest.approx(1000 / 1001, rel=1e-14)

    def test_large_gap_is_stable(self):
        assert posterior_model_prob(-1000.0, -1900.0) == 1.0
        assert posterior_model_prob(-1900.0, -1000.0) == pytest.approx(0.0, abs=1e-300)

    def test_unequal_prior(self):
        assert posterior_model_prob(0.0, 0.0, prior_a=0.2) == pytest.approx(0.2)

    def test_prior_range(self):
        with pytest.raises(ValueError):
            posterior_model_prob(0.0, 0.0, prior_a=1.0)

    def _tree(self, log_ev, log_prior=0.0, count=1):
        return ModelTree(RuleList(()), (True,), fake_evidence(["a"], np.zeros((1, 1)), log_ev), count, log_prior, 0.0)

    def test_single_tree_evidence(self):
        assert evidence_of_tree_model([self._tree(-12.5)]) == -12.5

    def test_equal_pair(self):
        assert evidence_of_tree_model([self._tree(-3.0), self._tree(-3.0)], [1, 1]) == pytest.approx(-3.0, abs=1e-14)

    def test_three_trees_direct_sum(self):
        trees = [self._tree(-10.0, -1.0, 3), self._tree(-11.0, -2.5, 1), self._tree(-9.0, -4.0, 6)]
        pr = np.exp([-1.0, -2.5, -4.0])
        pr /= pr.sum()
        ref = math.log(sum(p * math.exp(e) for p, e in zip(pr, [-10.0, -11.0, -9.0])))
        assert evidence_of_tree_model(trees, "prior") == pytest.approx(ref, abs=1e-12)
        cnt = np.array([3, 1, 6]) / 10
        ref = math.log(sum(p * math.exp(e) for p, e in zip(cnt, [-10.0, -11.0, -9.0])))
        assert evidence_of_tree_model(trees, "sample") == pytest.approx(ref, abs=1e-12)
        ref = math.log(0.5 * math.exp(-10.0) + 0.5 * math.exp(-9.0))
        assert evidence_of_tree_model(trees, [1, 0, 1]) == pytest.approx(ref, abs=1e-12)


def _distinct_lists():
    """Every rule list of up to four single-requirement antecedents on distinct features, by length."""
    from itertools import combinations, permutations
    reqs = build_requirements(bicycle_bins())
    by_len = {0: [[]]}
    for length in (1, 2, 3, 4):
        by_len[length] = [[r.label for r in perm]
                          for combo in combinations(reqs, length)
                          if len({r.feature for r in combo}) == length
                          for perm in permutations(combo)]
    return reqs, by_len


def fake_sample(scores):
    """TreeSample over distinct synthetic lists with chosen (length, log prior, log label evidence, count)."""
    reqs, by_len = _distinct_lists()
    used = {n: 0 for n in by_len}
    lists = []
    for length, *_ in scores:
        lists.append(RuleList.from_labels(by_len[length][used[length]], reqs))
        used[length] += 1
    lp, ll, cnt = zip(*[(s[1], s[2], s[3]) for s in scores])
    return TreeSample(tuple(lists), np.array(cnt), np.array(lp, float), np.array(ll, float))


class TestSelection:
    def test_single_list(self):
        ts = fake_sample([(1, -2.0, -50.0, 100)])
        assert select_trees(ts, 10) == [ts.lists[0]]

    def test_hand_ranking(self):
        # (length, log prior, log label evidence, count)
        scores = [
            (1, -2.0, -60.0, 10),   # 0 post -62
            (2, -3.0, -55.0, 10),   # 1 post -58  best posterior
            (3, -9.0, -50.0, 10),   # 2 post -59  best likelihood
            (2, -4.0, -56.0, 10),   # 3 post -60
            (4, -12.0, -51.0, 10),  # 4 post -63  2nd likelihood
            (1, -1.0, -70.0, 10),   # 5 post -71
            (2, -5.0, -58.0, 10),   # 6 post -63
        ]
        ts = fake_sample(scores)
        # k=4: ceil(1.2)=2 by posterior -> 1, 2; 2 by likelihood -> 2 (dup), 4; mean length 15/7 -> fill by
        # |len - 2.14|: lists 3 and 6 (len 2) tie on distance, broken by posterior -> 3
        assert select_tree_indices(ts, 4) == [1, 2, 4, 3]

    def test_reference_composition(self):
        rng = np.random.default_rng(0)
        scores = [(int(rng.integers(1, 5)), float(rng.normal(-10, 2)), float(rng.normal(-80, 5)), 5) for _ in range(40)]
        ts = fake_sample(scores)
        idx = select_tree_indices(ts, 10)
        assert len(idx) == len(set(idx)) == 10
        post = list(np.argsort(-ts.log_posteriors, kind="stable")[:3])
        assert idx[:3] == post
        lik_top = [i for i in np.argsort(-ts.log_liks, kind="stable")[:3]]
        assert set(lik_top) <= set(idx[:6])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), k=st.integers(1, 12))
    def test_storage_order_invariance(self, seed, k):
        rng = np.random.default_rng(seed)
        scores = [(int(rng.integers(1, 4)), float(rng.integers(-5, 0)), float(rng.integers(-9, -3)),
                   int(rng.integers(1, 9))) for _ in range(15)]
        ts = fake_sample(scores)
        perm = rng.permutation(len(ts))
        shuffled = TreeSample(tuple(ts.lists[i] for i in perm), ts.counts[perm], ts.log_priors[perm], ts.log_liks[perm])
        a = [rl.key() for rl in select_trees(ts, k)]
        b = [rl.key() for rl in select_trees(shuffled, k)]
        assert a == b

    def test_bad_k(self):
        with pytest.raises(ValueError):
            select_trees(fake_sample([(1, -1.0, -1.0, 1)]), 0)


class TestFitting:
    def test_consider_flags(self, bike):
        ds, spec = bike
        bm = discretize(ds, spec.bins)
        rl = spec.rule_list
        flags = consider_flags(rl, bm, "data")
        assert flags[0] is False and all(flags[1:])
        assert consider_flags(rl, bm, "all") == (True,) * 4
        with pytest.raises(ValueError):
            consider_flags(rl, bm, "some")

    def test_fit_planted_tree(self, bike):
        ds, spec = bike
        tree = fit_tree(ds, bicycle_utility(), spec.bins, spec.rule_list, n_draws=400, seed=1)
        assert tree.flags == (False, True, True, True)
        assert np.isfinite(tree.log_evidence)
        assert tree.evidence.draws.shape[1] == len(bicycle_utility().beta_names) + 2 + 3

    def test_forced_winnowing_of_chosen_alternative_is_impossible(self, bike):
        ds, spec = bike
        tree = fit_tree(ds, bicycle_utility(), spec.bins, RuleList(()), flags=(False,), n_draws=100)
        assert tree.log_evidence == -math.inf

    def test_compose_and_baseline(self, bike):
        ds, spec = bike
        bm = discretize(ds, spec.bins)
        cands = mine_conjunctions(bm)
        lists = (spec.rule_list, RuleList.from_labels(["distance:(4.37,inf)"], bm.requirements), RuleList(()))
        ts = TreeSample(lists, np.array([50, 30, 20]),
                        np.array([log_prior(rl, RuleListPrior(), cands) for rl in lists]),
                        np.array([log_marginal_labels(rl, bm) for rl in lists]))
        tp = compose(ds, bicycle_utility(), spec.bins, ts, k=3, n_draws=1000, seed=0)
        assert abs(tp.weights.sum() - 1) < 1e-12
        planted = [t.rule_list for t in tp.trees].index(spec.rule_list)
        assert tp.weights.argmax() == planted
        assert tp.trees[planted].count == 50
        base = fit_baseline(ds, bicycle_utility().with_gated_terms(["distance"]), n_draws=300)
        assert base.is_baseline and not tp.is_baseline
        assert evidence_of_tree_model(tp.trees) > base.trees[0].log_evidence
        again = compose(ds, bicycle_utility(), spec.bins, ts, k=3, n_draws=1000, seed=0)
        np.testing.assert_array_equal(again.weights, tp.weights)
