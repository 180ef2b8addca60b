"""Synthetic choice data with a planted rule list and planted logit.

Utilities here are evaluated directly from the planted coefficients and do
not go through :mod:`choicetree.choice`, so generated data can serve as an
independent check on the estimator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .choice import Term, UtilitySpec
from .data import (
    Alternative,
    Bins,
    ChoiceDataset,
    Column,
    FeatureSchema,
    binarize,
    build_requirements,
    coerce_bins,
)
from .rulelist import RuleList, assign_nodes


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, n)


@dataclass(frozen=True)
class Discrete:
    values: tuple[float, ...]
    probs: tuple[float, ...] | None = None

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = None if self.probs is None else np.asarray(self.probs) / np.sum(self.probs)
        return rng.choice(np.asarray(self.values, dtype=float), size=n, p=p)


@dataclass(frozen=True)
class Bernoulli:
    p: float

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return (rng.random(n) < self.p).astype(float)


@dataclass(frozen=True)
class Copy:
    """Alternative attribute equal to a person attribute."""

    column: str


def _default_sampler(b: Bins):
    if b.categories is not None:
        return Discrete(tuple(v for c in b.categories for v in c))
    finite = [e for e in b.edges if math.isfinite(e)]
    if not finite:
        return Uniform(0.0, 1.0)
    lo = finite[0] if math.isfinite(b.edges[0]) else finite[0] - 1.0
    width = finite[-1] - finite[-2] if len(finite) > 1 else 1.0
    hi = finite[-1] + width if math.isinf(b.edges[-1]) else finite[-1]
    return Uniform(lo, hi)


@dataclass(frozen=True)
class DGPSpec:
    """Everything needed to draw a dataset.

    ``node_constants`` gives the gated alternative's constant in each node
    of ``rules`` (planted antecedent labels, default node last); ``None``
    winnows the alternative in that node.  ``person`` samplers default to
    uniform over each tree feature's bin range.  ``attributes`` maps
    ``(column, alternative)`` to a sampler or :class:`Copy`; unlisted
    alternative attributes are 0.  ``availability`` maps an alternative to
    a person-level 0/1 column.
    """

    schema: FeatureSchema
    utility: UtilitySpec
    beta: Mapping[str, float]
    bins: tuple[Bins, ...]
    rules: tuple[str, ...]
    node_constants: tuple[float | None, ...]
    n: int
    seed: int = 0
    person: Mapping[str, object] = field(default_factory=dict)
    attributes: Mapping[tuple[str, str], object] = field(default_factory=dict)
    availability: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bins", coerce_bins(self.bins))
        if len(self.node_constants) != len(self.rules) + 1:
            raise ValueError("one node constant per antecedent plus the default node")
        for v in list(self.beta.values()) + [c for c in self.node_constants if c is not None]:
            if not math.isfinite(v):
                raise ValueError("planted parameters must be finite")
        missing = set(self.utility.beta_names) - set(self.beta)
        if missing:
            raise ValueError(f"no planted value for {sorted(missing)}")

    @property
    def rule_list(self) -> RuleList:
        return RuleList.from_labels(self.rules, build_requirements(self.bins))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    nodes: np.ndarray
    probabilities: np.ndarray
    consider: tuple[bool, ...]

    def to_dict(self, spec: DGPSpec, obs_ids) -> dict:
        return {
            "rules": list(spec.rules),
            "node_constants": [c for c in spec.node_constants],
            "consider": list(self.consider),
            "beta": {k: float(v) for k, v in sorted(spec.beta.items())},
            "seed": spec.seed,
            "n": spec.n,
            "observations": [
                {"obs_id": int(o), "node": int(k), "probabilities": [round(float(p), 12) for p in row]}
                for o, k, row in zip(obs_ids, self.nodes, self.probabilities)
            ],
        }


def planted_utilities(spec: DGPSpec, values: Mapping[str, np.ndarray], nodes: np.ndarray) -> np.ndarray:
    """(n, n_alts) utilities; gated entries in winnowed nodes are -inf."""
    schema = spec.schema
    n = len(nodes)
    V = np.zeros((n, schema.n_alts))
    for t in spec.utility.terms:
        j = schema.alt_index(t.alt)
        if t.coef == spec.utility.gated_constant:
            continue
        if t.column is None:
            V[:, j] += spec.beta[t.coef]
        else:
            x = values[t.column]
            V[:, j] += spec.beta[t.coef] * (x if x.ndim == 1 else x[:, j])
    g = schema.alt_index(spec.utility.gated)
    const = np.array([-np.inf if c is None else c for c in spec.node_constants])
    V[:, g] += const[nodes]
    return V


def generate(spec: DGPSpec) -> tuple[ChoiceDataset, GroundTruth]:
    """Draw features, assign planted nodes, and sample choices from the exact logit."""
    schema = spec.schema
    rng = np.random.default_rng(spec.seed)
    n, J = spec.n, schema.n_alts
    samplers = {b.feature: _default_sampler(b) for b in spec.bins}
    samplers.update(spec.person)
    values: dict[str, np.ndarray] = {}
    for col in schema.columns:
        if col.level == "person":
            if col.name not in samplers:
                raise ValueError(f"no sampler for person column {col.name!r}")
            values[col.name] = np.asarray(samplers[col.name].sample(rng, n), dtype=float)
    avail = np.ones((n, J), dtype=bool)
    for alt, colname in spec.availability.items():
        avail[:, schema.alt_index(alt)] = values[colname] != 0
    for col in schema.columns:
        if col.level != "alternative":
            continue
        x = np.zeros((n, J))
        for a in schema.alternatives:
            s = spec.attributes.get((col.name, a.name))
            if isinstance(s, Copy):
                x[:, a.id] = values[s.column]
            elif s is not None:
                x[:, a.id] = s.sample(rng, n)
        values[col.name] = np.where(avail, x, np.nan)

    rl = spec.rule_list
    probe = ChoiceDataset(schema, np.arange(n), avail.argmax(axis=1), avail, values) if n else None
    nodes = assign_nodes(rl, binarize(probe, spec.bins)) if n else np.zeros(0, dtype=np.int64)
    V = planted_utilities(spec, {k: np.nan_to_num(v) for k, v in values.items()}, nodes)
    V = np.where(avail, V, -np.inf)
    V = V - V.max(axis=1, keepdims=True)
    P = np.exp(V)
    P /= P.sum(axis=1, keepdims=True)
    u = rng.random(n)
    chosen = np.minimum((P.cumsum(axis=1) < u[:, None]).sum(axis=1), J - 1)
    # guard against round-off landing on a zero-probability column
    chosen = np.where(P[np.arange(n), chosen] > 0, chosen, P.argmax(axis=1))
    ds = ChoiceDataset(schema, np.arange(1, n + 1), chosen, avail, values)
    consider = tuple(c is not None for c in spec.node_constants)
    return ds, GroundTruth(nodes, P, consider)


def write_truth(truth: GroundTruth, spec: DGPSpec, obs_ids, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth.to_dict(spec, obs_ids), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Bicycle-consideration preset


def bicycle_schema() -> FeatureSchema:
    alts = (Alternative(0, "drive"), Alternative(1, "transit"), Alternative(2, "walk", True), Alternative(3, "bike"))
    cols = (
        Column("time", "alternative", "utility", "min/10"),
        Column("cost", "alternative", "utility", "USD"),
        Column("autos_per_driver", "person", "utility"),
        Column("owns_bike", "person", "utility"),
        Column("kids", "person", "both", "count"),
        Column("distance", "person", "both", "miles"),
        Column("bike_lanes", "person", "both", "share of roadway"),
        Column("slope", "person", "both", "grade"),
    )
    return FeatureSchema(alts, cols, gated="bike", subsample="owns_bike")


def bicycle_bins() -> tuple[Bins, ...]:
    return (
        Bins("kids", edges=(0, 1, 2, math.inf)),
        Bins("distance", edges=(0, 1.17, 1.92, 3.00, 4.37, math.inf)),
        Bins("bike_lanes", edges=(0, 0.04, 0.11, math.inf)),
        Bins("slope", edges=(0, 0.01, 0.02, 0.03, 0.04, math.inf)),
    )


TREE_FEATURES = ("kids", "distance", "bike_lanes", "slope")

PLANTED_RULES = (
    "distance:(4.37,inf)",
    "kids:[0,1] & bike_lanes:(0.11,inf)",
    "distance:[0,1.17]",
)
PLANTED_CONSTANTS = (None, 0.0, -3.0, -1.5)

PLANTED_BETA = {
    "b_time_auto": -0.5,
    "b_autos_per_driver": 0.8,
    "asc_transit": 0.5,
    "b_time_transit": -0.3,
    "b_cost": -0.3,
    "asc_walk": -1.0,
    "b_walk_distance": -1.0,
}


def bicycle_utility() -> UtilitySpec:
    """Utility of the model tree: the bike constant is the only bike term."""
    return UtilitySpec(
        (
            Term("drive", "b_time_auto", "time"),
            Term("drive", "b_autos_per_driver", "autos_per_driver"),
            Term("transit", "asc_transit"),
            Term("transit", "b_time_transit", "time"),
            Term("transit", "b_cost", "cost"),
            Term("walk", "asc_walk"),
            Term("walk", "b_walk_distance", "distance"),
            Term("bike", "asc_bike"),
        ),
        "bike",
    )


def bicycle_baseline_utility() -> UtilitySpec:
    """Plain MNL: tree features enter the bike utility linearly."""
    return bicycle_utility().with_gated_terms(TREE_FEATURES)


def bicycle_dgp(n: int = 2000, seed: int = 0, rules: Sequence[str] = PLANTED_RULES,
                node_constants: Sequence[float | None] = PLANTED_CONSTANTS) -> DGPSpec:
    return DGPSpec(
        schema=bicycle_schema(),
        utility=bicycle_utility(),
        beta=dict(PLANTED_BETA),
        bins=bicycle_bins(),
        rules=tuple(rules),
        node_constants=tuple(node_constants),
        n=n,
        seed=seed,
        person={
            "kids": Discrete((0, 1, 2, 3, 4), (0.35, 0.25, 0.20, 0.12, 0.08)),
            "distance": Uniform(0.2, 7.0),
            "bike_lanes": Uniform(0.0, 0.25),
            "slope": Uniform(0.0, 0.06),
            "autos_per_driver": Uniform(0.0, 1.5),
            "owns_bike": Bernoulli(0.8),
        },
        attributes={
            ("time", "drive"): Uniform(1.0, 6.0),
            ("time", "transit"): Uniform(2.0, 9.0),
            ("cost", "transit"): Uniform(1.0, 4.0),
        },
        availability={"bike": "owns_bike"},
    )
