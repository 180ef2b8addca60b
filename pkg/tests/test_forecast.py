"""Policy sweeps, mode shares, and credible-interval widths."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from choicetree.choice import build_design, choice_prob
from choicetree.data import ChoiceDataset, SchemaError, binarize
from choicetree.forecast import (
    ForecastCurve,
    SweepSpec,
    interval_width_profile,
    mode_share,
    sweep,
    systematic_resample,
    weighted_quantile,
    write_curve,
)
from choicetree.model_tree import ModelTree, TreePosterior, predict
from choicetree.rulelist import assign_nodes
from choicetree.synth import bicycle_dgp, generate

from conftest import binary_logit_spec, binary_schema
from test_model_tree import fake_evidence, three_tree_fixture

EDGES = (0.04, 0.11)


@pytest.fixture(scope="module")
def bike60():
    ds, _ = generate(bicycle_dgp(n=60, seed=3))
    return ds


@pytest.fixture(scope="module")
def tree_model(bike60):
    return three_tree_fixture(bike60, np.random.default_rng(5), n_draws=40)


def zero_x_data(n=20):
    return ChoiceDataset(binary_schema(), np.arange(n), np.zeros(n, int), np.ones((n, 2), bool), {"x": np.zeros(n)})


def one_coefficient_mnl(beta_draws, asc=-2.0):
    """Plain MNL on ``zero_x_data`` whose only uncertain coefficient is ``b_x``."""
    ds = zero_x_data()
    names = build_design(ds, binary_logit_spec()).names
    draws = np.zeros((len(beta_draws), len(names)))
    draws[:, names.index("asc_b")] = asc
    draws[:, names.index("b_x")] = beta_draws
    tree = ModelTree(None, (), fake_evidence(names, draws))
    return TreePosterior((tree,), np.ones(1), binary_logit_spec()), ds


class TestSweepSpec:
    def test_arange_reaches_stop(self):
        s = SweepSpec.arange("bike_lanes", 0.0, 0.70, 0.01)
        assert len(s.grid) == 71
        assert s.grid[0] == 0.0 and s.grid[-1] == 0.7
        assert s.grid[4] == 0.04

    @pytest.mark.parametrize("grid", [(), (0.1, 0.1), (0.2, 0.1)])
    def test_rejects_bad_grids(self, grid):
        with pytest.raises(ValueError):
            SweepSpec("x", grid)

    @settings(max_examples=100, deadline=None)
    @given(
        xs=st.lists(st.floats(-5, 5) | st.just(math.nan), min_size=1, max_size=20),
        a=st.floats(-5, 5),
        b=st.floats(-5, 5),
        clamp=st.none() | st.floats(-5, 5),
    )
    def test_raise_is_monotone(self, xs, a, b, clamp):
        x = np.array(xs)
        s = SweepSpec("x", (0.0,), clamp)
        lo, hi = s.raise_to(x, min(a, b)), s.raise_to(x, max(a, b))
        ok = ~np.isnan(x)
        assert np.all(lo[ok] >= x[ok])
        assert np.all(hi[ok] >= lo[ok])
        assert np.all(np.isnan(lo[~ok]))

    def test_clamp_leaves_high_values(self):
        s = SweepSpec("x", (0.0,), clamp=0.5)
        np.testing.assert_array_equal(s.raise_to(np.array([0.1, 0.9]), 0.8), [0.5, 0.9])


class TestModeShare:
    def test_identical_rows(self):
        p = np.tile([0.1, 0.6, 0.3], (7, 1))
        np.testing.assert_allclose(mode_share(p), [0.1, 0.6, 0.3], atol=1e-15)

    def test_two_rows(self):
        assert mode_share(np.array([[0.8, 0.2], [0.6, 0.4]]))[1] == pytest.approx(0.3, abs=1e-15)

    def test_weighted_matches_loop(self, rng):
        p = rng.dirichlet(np.ones(4), size=10)
        w = rng.random(10)
        expect = [sum(w[i] * p[i, j] for i in range(10)) / sum(w) for j in range(4)]
        np.testing.assert_allclose(mode_share(p, w), expect, atol=1e-14)


class TestHelpers:
    @settings(max_examples=100, deadline=None)
    @given(
        vals=st.lists(st.floats(-100, 100), min_size=1, max_size=30),
        seed=st.integers(0, 10_000),
        q=st.floats(0.0, 1.0),
    )
    def test_weighted_quantile_matches_cdf_scan(self, vals, seed, q):
        v = np.array(vals)
        w = np.random.default_rng(seed).random(len(v)) + 0.01
        order = np.argsort(v, kind="stable")
        cdf = np.cumsum(w[order]) / w.sum()
        # smallest value whose weighted CDF reaches q
        k = int(np.searchsorted(cdf, q - 1e-12 * max(1.0, q), side="left"))
        expect = v[order][min(k, len(v) - 1)]
        assert weighted_quantile(v, q, w) == pytest.approx(expect)

    @given(seed=st.integers(0, 10_000), n=st.integers(1, 200))
    def test_systematic_resample_counts(self, seed, n):
        rng = np.random.default_rng(seed)
        w = rng.random(7) ** 2
        idx = systematic_resample(w, n, rng)
        counts = np.bincount(idx, minlength=7)
        assert counts.sum() == n
        assert np.all(np.abs(counts - n * w / w.sum()) < 1 + 1e-9)


class TestTreeSweep:
    def test_baseline_grid_equals_prediction(self, tree_model, bike60):
        lo = float(np.nanmin(bike60.column("bike_lanes")))
        curve = sweep(tree_model, bike60, SweepSpec("bike_lanes", (lo,)), max_draws=None)
        np.testing.assert_allclose(curve.mean[0], mode_share(predict(tree_model, bike60)), atol=1e-12)

    def test_shares_are_probabilities(self, tree_model, bike60):
        curve = sweep(tree_model, bike60, SweepSpec.arange("bike_lanes", 0.0, 0.3, 0.02), max_draws=None)
        np.testing.assert_allclose(curve.mean.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(curve.samples.sum(axis=2), 1.0, atol=1e-12)
        assert np.all((curve.lower >= 0) & (curve.upper <= 1) & (curve.lower <= curve.upper))
        assert np.all((curve.lower <= curve.mean + 1e-12) & (curve.mean <= curve.upper + 1e-12))

    def test_piecewise_constant_between_edges(self, tree_model, bike60):
        spec = SweepSpec.arange("bike_lanes", 0.0, 0.3, 0.005)
        curve = sweep(tree_model, bike60, spec, max_draws=None)
        g = curve.grid
        for i in range(len(g) - 1):
            crosses = any(g[i] <= e < g[i + 1] for e in EDGES)
            if not crosses:
                np.testing.assert_array_equal(curve.samples[i], curve.samples[i + 1])
        # past the last edge nobody changes node again
        tail = g > EDGES[-1]
        assert np.ptp(curve.mean[tail], axis=0).max() == 0.0

    def test_sweep_samples_match_node_reassignment(self, tree_model, bike60):
        # at one grid value, the pair samples equal per-draw shares on a hand-raised copy
        value = 0.07
        x = bike60.column("bike_lanes")
        raised = bike60.with_values("bike_lanes", np.where(np.isnan(x), x, np.maximum(x, value)))
        curve = sweep(tree_model, bike60, SweepSpec("bike_lanes", (value,)), max_draws=None)
        X = binarize(raised, tree_model.bins)
        rows = []
        for tree in tree_model.trees:
            d = build_design(raised, tree_model.spec, assign_nodes(tree.rule_list, X), tree.flags)
            for theta in tree.evidence.draws:
                rows.append(choice_prob(theta, d).mean(axis=0))
        np.testing.assert_allclose(curve.samples[0], np.array(rows), atol=1e-12)

    def test_single_draw_has_zero_width(self, bike60):
        rng = np.random.default_rng(2)
        tp = three_tree_fixture(bike60, rng, n_draws=1)
        one = TreePosterior(tp.trees[:1], np.ones(1), tp.spec, tp.bins)
        curve = sweep(one, bike60, SweepSpec.arange("bike_lanes", 0.0, 0.2, 0.05))
        np.testing.assert_array_equal(interval_width_profile(curve), 0.0)

    def test_resampling(self, tree_model, bike60):
        spec = SweepSpec("bike_lanes", (0.0, 0.2))
        full = sweep(tree_model, bike60, spec, max_draws=None)
        same = sweep(tree_model, bike60, spec, max_draws=40)
        np.testing.assert_array_equal(same.samples, full.samples)
        thin = sweep(tree_model, bike60, spec, max_draws=20, seed=4)
        assert thin.samples.shape[1] == 60
        np.testing.assert_allclose(thin.weights, np.repeat(tree_model.weights / 20, 20), atol=1e-15)
        # each resampled pair is one of the original pairs of the same tree
        for t in range(3):
            orig = {row.tobytes() for row in full.samples[:, 40 * t:40 * (t + 1)].transpose(1, 0, 2)}
            for row in thin.samples[:, 20 * t:20 * (t + 1)].transpose(1, 0, 2):
                assert row.tobytes() in orig

    def test_unknown_variable(self, tree_model, bike60):
        with pytest.raises(SchemaError):
            sweep(tree_model, bike60, SweepSpec("nope", (0.0,)))

    def test_write_curve(self, tree_model, bike60, tmp_path):
        curve = sweep(tree_model, bike60, SweepSpec("bike_lanes", (0.0, 0.1)))
        path = tmp_path / "curve.csv"
        write_curve(curve, path, header=["config abc"])
        lines = path.read_text().splitlines()
        assert lines[0] == "# config abc"
        rows = list(csv.reader(lines[1:]))
        assert rows[0] == ["bike_lanes", "alternative", "mean_share", "lower", "upper"]
        assert len(rows) == 1 + 2 * bike60.n_alts
        assert float(rows[1][2]) == curve.mean[0, 0]


class TestMnlWidth:
    def test_width_zero_at_zero(self):
        tp, ds = one_coefficient_mnl(np.random.default_rng(0).normal(1.0, 0.5, 500))
        curve = sweep(tp, ds, SweepSpec("x", (0.0, 0.3)))
        assert interval_width_profile(curve, "b")[0] == 0.0
        assert interval_width_profile(curve, "b")[1] > 0.0

    def test_bounds_match_sample_quantiles(self):
        beta = np.random.default_rng(1).normal(1.0, 0.5, 400)
        tp, ds = one_coefficient_mnl(beta)
        spec = SweepSpec.arange("x", 0.0, 0.7, 0.05)
        curve = sweep(tp, ds, spec, max_draws=None)
        for gi, g in enumerate(spec.grid):
            share = expit(-2.0 + beta * g)
            lo, hi = np.quantile(share, [0.025, 0.975], method="inverted_cdf")
            assert curve.lower[gi, 1] == pytest.approx(lo, abs=1e-12)
            assert curve.upper[gi, 1] == pytest.approx(hi, abs=1e-12)
            # the utility-scale bounds are the coefficient quantiles times x
            qb = np.quantile(beta, [0.025, 0.975], method="inverted_cdf")
            np.testing.assert_allclose([curve.lower[gi, 1], curve.upper[gi, 1]], expit(-2.0 + qb * g), atol=1e-12)

    def test_width_nondecreasing(self):
        tp, ds = one_coefficient_mnl(np.random.default_rng(2).normal(1.0, 0.5, 1000))
        w = interval_width_profile(sweep(tp, ds, SweepSpec.arange("x", 0.0, 0.7, 0.01)), "b")
        assert np.all(np.diff(w) >= 0)

    def test_curve_type(self):
        tp, ds = one_coefficient_mnl(np.ones(3))
        curve = sweep(tp, ds, SweepSpec("x", (0.0,)))
        assert isinstance(curve, ForecastCurve)
        assert curve.share("b")[0] == pytest.approx(expit(-2.0), abs=1e-14)
