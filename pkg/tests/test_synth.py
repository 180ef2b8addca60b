"""Synthetic generator: shapes, planted winnowing, node bookkeeping, and calibration."""

import json
import math

import numpy as np
import pytest
from scipy.stats import chi2

from choicetree.choice import Term, UtilitySpec
from choicetree.data import Alternative, Bins, Column, FeatureSchema, binarize
from choicetree.rulelist import assign_nodes
from choicetree.synth import (
    PLANTED_RULES,
    DGPSpec,
    Uniform,
    bicycle_dgp,
    generate,
    write_truth,
)


def symmetric_spec(n, seed=0):
    """Two alternatives, zero utilities, one always-considered node."""
    schema = FeatureSchema((Alternative(0, "a"), Alternative(1, "b")), (Column("d", "person", "tree"),), gated="b")
    return DGPSpec(schema, UtilitySpec((Term("b", "asc_b"),), "b"), {}, (Bins("d", edges=(0, 1, math.inf)),),
                   (), (0.0,), n, seed)


def threshold_spec(n, seed=0):
    """``distance > 3`` winnows ``b``; otherwise P(b) = sigmoid(0.5)."""
    schema = FeatureSchema((Alternative(0, "a"), Alternative(1, "b")),
                           (Column("distance", "person", "tree"),), gated="b")
    return DGPSpec(schema, UtilitySpec((Term("b", "asc_b"),), "b"), {},
                   (Bins("distance", edges=(0, 3, math.inf)),), ("distance:(3,inf)",), (None, 0.5), n, seed,
                   person={"distance": Uniform(0.0, 6.0)})


class TestShapes:
    def test_empty(self):
        ds, truth = generate(bicycle_dgp(n=0))
        assert ds.n_obs == 0
        assert truth.nodes.shape == (0,) and truth.probabilities.shape == (0, 4)

    def test_size_and_determinism(self):
        a, ta = generate(bicycle_dgp(n=200, seed=5))
        b, tb = generate(bicycle_dgp(n=200, seed=5))
        c, _ = generate(bicycle_dgp(n=200, seed=6))
        assert a.n_obs == 200
        np.testing.assert_array_equal(a.chosen, b.chosen)
        np.testing.assert_array_equal(ta.probabilities, tb.probabilities)
        assert not np.array_equal(a.column("distance"), c.column("distance"))

    def test_probabilities_are_valid(self):
        ds, truth = generate(bicycle_dgp(n=500, seed=1))
        np.testing.assert_allclose(truth.probabilities.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(truth.probabilities[~ds.available] == 0)
        assert np.all(ds.available[np.arange(ds.n_obs), ds.chosen])
        assert np.all(truth.probabilities[np.arange(ds.n_obs), ds.chosen] > 0)

    @pytest.mark.parametrize(
        "kw, match",
        [
            ({"node_constants": (0.0,)}, "one node constant"),
            ({"node_constants": (None, math.inf, 0.0, 0.0)}, "finite"),
        ],
    )
    def test_invalid_specs(self, kw, match):
        with pytest.raises(ValueError, match=match):
            bicycle_dgp(**kw)

    def test_missing_beta(self):
        spec = bicycle_dgp()
        with pytest.raises(ValueError, match="planted value"):
            DGPSpec(spec.schema, spec.utility, {}, spec.bins, spec.rules, spec.node_constants, 10)


class TestPlantedTruth:
    def test_symmetric_binomial(self):
        ds, _ = generate(symmetric_spec(10_000, seed=3))
        p_hat = ds.chosen.mean()
        # 99.9% normal interval for a fair coin
        assert abs(p_hat - 0.5) < 3.29 * math.sqrt(0.25 / 10_000)

    def test_threshold_winnows(self):
        ds, truth = generate(threshold_spec(5000, seed=1))
        far = ds.column("distance") > 3
        assert far.sum() > 1000
        assert (ds.chosen[far] == 1).sum() == 0
        assert np.all(truth.probabilities[far, 1] == 0)
        assert 0.5 < ds.chosen[~far].mean() < 0.75
        assert truth.consider == (False, True)

    def test_node_frequencies_match_assignment(self):
        spec = bicycle_dgp(n=3000, seed=8)
        ds, truth = generate(spec)
        nodes = assign_nodes(spec.rule_list, binarize(ds, spec.bins))
        np.testing.assert_array_equal(truth.nodes, nodes)
        np.testing.assert_array_equal(np.bincount(truth.nodes, minlength=4), np.bincount(nodes, minlength=4))
        assert np.all(np.bincount(nodes, minlength=4) > 0)

    def test_winnowed_node_never_bikes(self):
        ds, truth = generate(bicycle_dgp(n=3000, seed=2))
        bike = ds.schema.alt_index("bike")
        assert not np.any((truth.nodes == 0) & (ds.chosen == bike))
        # bike ownership gates availability
        np.testing.assert_array_equal(ds.available[:, bike], ds.column("owns_bike") != 0)

    def test_chi_square_calibration(self):
        # cells are (node, alternative); the Pearson statistic with expected counts
        # from the true probabilities is conservative for heterogeneous rows
        passes = 0
        for seed in range(20):
            ds, truth = generate(bicycle_dgp(n=10_000, seed=100 + seed))
            stat, dof = 0.0, 0
            for k in range(4):
                rows = truth.nodes == k
                expected = truth.probabilities[rows].sum(axis=0)
                observed = np.bincount(ds.chosen[rows], minlength=4)
                cells = expected > 5
                stat += float((((observed - expected) ** 2)[cells] / expected[cells]).sum())
                dof += int(cells.sum()) - 1
            passes += chi2.sf(stat, dof) > 0.01
        assert passes >= 19

    def test_truth_sidecar(self, tmp_path):
        spec = bicycle_dgp(n=30, seed=4)
        ds, truth = generate(spec)
        path = tmp_path / "truth.json"
        write_truth(truth, spec, ds.obs_ids, path)
        d = json.loads(path.read_text())
        assert d["rules"] == list(PLANTED_RULES)
        assert d["consider"] == [False, True, True, True]
        assert len(d["observations"]) == 30
        assert [o["node"] for o in d["observations"]] == truth.nodes.tolist()
        np.testing.assert_allclose([o["probabilities"] for o in d["observations"]], truth.probabilities, atol=1e-12)
