"""Shared fixtures: small schemas and datasets that every module test can reuse."""

import numpy as np
import pytest

from choicetree.choice import Term, UtilitySpec
from choicetree.data import Alternative, ChoiceDataset, Column, FeatureSchema

# acceptance outcomes, filled by test_acceptance and printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def binary_schema(columns=("x",)):
    """Two alternatives, ``b`` gated, person-level utility covariates."""
    alts = (Alternative(0, "a"), Alternative(1, "b"))
    cols = tuple(Column(c, "person", "both") for c in columns)
    return FeatureSchema(alts, cols, gated="b")


def binary_logit_data(n, alpha, beta, seed, x_scale=1.0):
    """Binary logit rows: P(b) = sigmoid(alpha + beta * x), x ~ N(0, x_scale^2)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, x_scale, n)
    p = 1.0 / (1.0 + np.exp(-(alpha + beta * x)))
    chosen = (rng.random(n) < p).astype(int)
    return ChoiceDataset(binary_schema(), np.arange(n), chosen, np.ones((n, 2), bool), {"x": x})


def binary_logit_spec():
    """V_a = 0, V_b = asc_b + b_x * x."""
    return UtilitySpec((Term("b", "asc_b"), Term("b", "b_x", "x")), "b")


def random_choice_data(n, n_alts, seed, n_person=2, n_alt_cols=1, avail_p=0.7, gated=None):
    """Random dataset with person- and alternative-level columns and random availability."""
    rng = np.random.default_rng(seed)
    alts = tuple(Alternative(j, f"m{j}") for j in range(n_alts))
    cols = tuple(Column(f"p{k}", "person", "both") for k in range(n_person))
    cols += tuple(Column(f"z{k}", "alternative", "utility") for k in range(n_alt_cols))
    schema = FeatureSchema(alts, cols, gated=gated or alts[-1].name)
    avail = rng.random((n, n_alts)) < avail_p
    avail[np.arange(n), rng.integers(0, n_alts, n)] = True
    chosen = np.array([rng.choice(np.flatnonzero(r)) for r in avail])
    vals = {f"p{k}": rng.normal(size=n) for k in range(n_person)}
    for k in range(n_alt_cols):
        vals[f"z{k}"] = np.where(avail, rng.normal(size=(n, n_alts)), np.nan)
    return ChoiceDataset(schema, np.arange(n), chosen, avail, vals)


def random_spec(schema, seed):
    """Random utility: constants on all but the first alternative, generic z slopes, person slopes."""
    rng = np.random.default_rng(seed)
    names = schema.alt_names
    terms = []
    for j, a in enumerate(names[1:], start=1):
        terms.append(Term(a, f"asc_{a}"))
        for c in schema.columns:
            if c.level == "person" and rng.random() < 0.6:
                terms.append(Term(a, f"b_{c.name}_{a}", c.name))
    for c in schema.columns:
        if c.level == "alternative":
            for a in names:
                terms.append(Term(a, f"b_{c.name}", c.name))
    return UtilitySpec(tuple(terms), schema.gated)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
