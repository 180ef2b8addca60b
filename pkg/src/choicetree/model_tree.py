"""Model trees: rule lists whose output nodes host a logit choice model.

Estimation runs in two stages.  The rule-list sampler explores partitions
using only the gated-alternative labels.  A handful of the visited lists
are then fitted with the full choice model and importance-reweighted so
that the collection approximates the posterior over trees given every
observed choice.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .choice import (
    Design,
    EvidenceEstimate,
    PriorSpec,
    Term,
    UtilitySpec,
    build_design,
    estimate_evidence,
    impossible_evidence,
    map_estimate,
    mean_choice_prob,
)
from .data import Bins, ChoiceDataset, binarize, build_requirements, coerce_bins, discretize
from .rulelist import RuleList, TreeSample, assign_nodes, node_counts

CONSIDER_POLICIES = ("data", "all")


class CompositionError(ValueError):
    pass


def consider_flags(rl: RuleList, bm, policy: str = "data") -> tuple[bool, ...]:
    """Per-node consider flag.  ``"data"``: a node winnows the gated alternative
    iff nobody in it chose that alternative; ``"all"``: every node considers it."""
    if policy not in CONSIDER_POLICIES:
        raise ValueError(f"consider policy must be one of {CONSIDER_POLICIES}")
    if policy == "all":
        return (True,) * rl.n_nodes
    n1, _ = node_counts(rl, bm)
    return tuple(bool(c > 0) for c in n1)


@dataclass(frozen=True, eq=False)
class ModelTree:
    """A rule list with consider flags and its fitted choice model.

    ``rule_list=None`` denotes the plain MNL (no tree).  ``count`` is the
    number of times the sampler visited the list; ``log_prior`` and
    ``log_label_lik`` are its rule-list prior and label evidence.
    """

    rule_list: RuleList | None
    flags: tuple[bool, ...]
    evidence: EvidenceEstimate
    count: int = 1
    log_prior: float = 0.0
    log_label_lik: float = 0.0

    @property
    def log_evidence(self) -> float:
        return self.evidence.log_evidence

    @property
    def n_consider(self) -> int:
        return sum(self.flags)

    def nodes(self, dataset: ChoiceDataset, bins) -> np.ndarray | None:
        if self.rule_list is None:
            return None
        return assign_nodes(self.rule_list, binarize(dataset, bins))

    def design(self, dataset: ChoiceDataset, spec: UtilitySpec, bins) -> Design:
        nodes = self.nodes(dataset, bins)
        return build_design(dataset, spec, nodes, self.flags if nodes is not None else None)

    def to_dict(self, requirements) -> dict:
        return {
            "rule_list": None if self.rule_list is None else self.rule_list.labels(requirements),
            "flags": list(self.flags),
            "count": int(self.count),
            "log_prior": float(self.log_prior),
            "log_label_lik": float(self.log_label_lik),
            "evidence": self.evidence.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, requirements) -> "ModelTree":
        rl = None if d["rule_list"] is None else RuleList.from_labels(d["rule_list"], requirements)
        return cls(rl, tuple(bool(f) for f in d["flags"]), EvidenceEstimate.from_dict(d["evidence"]),
                   d["count"], d["log_prior"], d["log_label_lik"])


@dataclass(frozen=True, eq=False)
class TreePosterior:
    """Weighted model trees sharing one utility specification and one set of bins."""

    trees: tuple[ModelTree, ...]
    weights: np.ndarray
    spec: UtilitySpec
    bins: tuple[Bins, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.trees),):
            raise CompositionError("one weight per tree")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-12):
            raise CompositionError("tree weights must be nonnegative and sum to 1")
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bins", coerce_bins(self.bins))

    @property
    def requirements(self):
        return build_requirements(self.bins)

    @property
    def is_baseline(self) -> bool:
        return all(t.rule_list is None for t in self.trees)

    def to_dict(self) -> dict:
        reqs = self.requirements
        return {
            "meta": self.meta,
            "spec": spec_to_dict(self.spec),
            "bins": [bins_to_dict(b) for b in self.bins],
            "weights": [float(w) for w in self.weights],
            "trees": [t.to_dict(reqs) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreePosterior":
        bins = tuple(bins_from_dict(b) for b in d["bins"])
        reqs = build_requirements(bins)
        return cls(
            tuple(ModelTree.from_dict(t, reqs) for t in d["trees"]),
            np.array(d["weights"], dtype=float),
            spec_from_dict(d["spec"]),
            bins,
            d.get("meta", {}),
        )


def spec_to_dict(spec: UtilitySpec) -> dict:
    return {"gated": spec.gated, "terms": [[t.alt, t.coef, t.column] for t in spec.terms]}


def spec_from_dict(d: dict) -> UtilitySpec:
    return UtilitySpec(tuple(Term(*t) for t in d["terms"]), d["gated"])


def _enc(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def bins_to_dict(b: Bins) -> dict:
    if b.edges is not None:
        return {"feature": b.feature, "edges": [_enc(e) for e in b.edges]}
    return {"feature": b.feature, "categories": [list(c) for c in b.categories]}


def bins_from_dict(d: dict) -> Bins:
    if "edges" in d:
        return Bins(d["feature"], edges=tuple(float(e) for e in d["edges"]))
    return Bins(d["feature"], categories=tuple(tuple(c) for c in d["categories"]))


def write_posterior(tp: TreePosterior, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tp.to_dict(), fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_posterior(path) -> TreePosterior:
    with open(path, encoding="utf-8") as fh:
        return TreePosterior.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Fitting


def fit_tree(
    dataset: ChoiceDataset,
    spec: UtilitySpec,
    bins,
    rule_list: RuleList,
    prior: PriorSpec = PriorSpec(),
    policy: str = "data",
    flags: Sequence[bool] | None = None,
    n_draws: int = 2000,
    df: float = 5.0,
    seed: int = 0,
    starts: int = 4,
    count: int = 1,
    log_prior: float = 0.0,
    log_label_lik: float = 0.0,
) -> ModelTree:
    """Fit the hierarchical logit bound to ``rule_list`` on every observation.

    Consider flags come from the tree-estimation subsample unless given.
    A tree that winnows an alternative somebody chose has evidence zero.
    """
    bins = coerce_bins(bins)
    if flags is None:
        flags = consider_flags(rule_list, discretize(dataset, bins), policy)
    flags = tuple(bool(f) for f in flags)
    if len(flags) != rule_list.n_nodes:
        raise ValueError("one consider flag per node")
    nodes = assign_nodes(rule_list, binarize(dataset, bins))
    design = build_design(dataset, spec, nodes, flags)
    if design.feasible():
        ev = estimate_evidence(design, prior, n_draws=n_draws, df=df, seed=seed, starts=starts)
    else:
        ev = impossible_evidence(design)
    return ModelTree(rule_list, flags, ev, count, log_prior, log_label_lik)


def fit_baseline(
    dataset: ChoiceDataset,
    spec: UtilitySpec,
    prior: PriorSpec = PriorSpec(),
    n_draws: int = 2000,
    df: float = 5.0,
    seed: int = 0,
    starts: int = 4,
) -> TreePosterior:
    """Plain MNL as a one-member posterior, so prediction and sweeps treat both alike."""
    design = build_design(dataset, spec)
    me = map_estimate(design, prior, starts=starts, seed=seed)
    ev = estimate_evidence(design, prior, n_draws=n_draws, df=df, seed=seed, map_est=me)
    return TreePosterior((ModelTree(None, (), ev),), np.ones(1), spec, (), {"model": "mnl"})


# ---------------------------------------------------------------------------
# Selection and reweighting


def select_tree_indices(sample: TreeSample, k: int = 10, quotas: tuple[float, float] = (0.3, 0.3)) -> list[int]:
    """Indices into ``sample`` of the trees kept for choice-model fitting.

    Top ``ceil(q0 k)`` by log posterior, then top ``ceil(q1 k)`` by label
    evidence, then lists whose length is nearest the posterior mean length
    (ranked by log posterior) until ``k`` are chosen.  Ties fall back to the
    canonical list order, so storage order does not matter.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(sample) == 0:
        raise CompositionError("empty tree sample")
    idx = range(len(sample))
    keys = [rl.key() for rl in sample.lists]
    lpost = sample.log_posteriors
    by_post = sorted(idx, key=lambda i: (-lpost[i], keys[i]))
    by_lik = sorted(idx, key=lambda i: (-sample.log_liks[i], keys[i]))
    chosen: list[int] = []
    for ranking, q in ((by_post, quotas[0]), (by_lik, quotas[1])):
        for i in ranking[: math.ceil(q * k)]:
            if i not in chosen and len(chosen) < k:
                chosen.append(i)
    mu = sample.mean_length()
    rest = sorted(
        (i for i in idx if i not in chosen),
        key=lambda i: (abs(len(sample.lists[i]) - mu), -lpost[i], keys[i]),
    )
    chosen += rest[: k - len(chosen)]
    return chosen


def select_trees(sample: TreeSample, k: int = 10, quotas: tuple[float, float] = (0.3, 0.3)) -> list[RuleList]:
    return [sample.lists[i] for i in select_tree_indices(sample, k, quotas)]


def tree_log_weights(trees: Sequence[ModelTree]) -> np.ndarray:
    """log evidence - log label evidence + log S_m (the rule-list prior cancels)."""
    return np.array([t.log_evidence - t.log_label_lik + math.log(t.count) for t in trees])


def normalize_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    if log_w.size == 0 or not np.isfinite(log_w).any():
        raise CompositionError("every tree has zero weight")
    w = np.exp(log_w - logsumexp(log_w))
    return w / w.sum()


def reweight_trees(trees: Sequence[ModelTree], spec: UtilitySpec, bins, meta: dict | None = None) -> TreePosterior:
    """Importance-reweight fitted trees, renormalising over the selected set."""
    weights = normalize_log_weights(tree_log_weights(trees))
    return TreePosterior(tuple(trees), weights, spec, coerce_bins(bins), dict(meta or {}))


# ---------------------------------------------------------------------------
# Prediction and comparison


def predict(tp: TreePosterior, dataset: ChoiceDataset) -> np.ndarray:
    """Choice probabilities averaged over trees (posterior weights) and draws (importance weights)."""
    out = np.zeros((dataset.n_obs, dataset.n_alts))
    X = binarize(dataset, tp.bins) if tp.bins else None
    for tree, w in zip(tp.trees, tp.weights):
        if w == 0:
            continue
        nodes = None if tree.rule_list is None else assign_nodes(tree.rule_list, X)
        design = build_design(dataset, tp.spec, nodes, tree.flags if nodes is not None else None)
        out += w * mean_choice_prob(tree.evidence.draws, tree.evidence.weights, design)
    return out


def posterior_model_prob(log_ev_a: float, log_ev_b: float, prior_a: float = 0.5) -> float:
    """Posterior probability of model a against model b."""
    if not 0 < prior_a < 1:
        raise ValueError("prior_a must lie in (0, 1)")
    la = math.log(prior_a) + log_ev_a
    lb = math.log1p(-prior_a) + log_ev_b
    if la == -math.inf and lb == -math.inf:
        return prior_a
    return float(expit(la - lb))


def evidence_of_tree_model(trees: Sequence[ModelTree], prior_weights: str | Sequence[float] = "prior") -> float:
    """log sum_m P(m) P(Y | X, m) over the selected trees.

    ``prior_weights="prior"`` uses the rule-list prior renormalised over the
    selected set; ``"sample"`` uses the renormalised visit counts; an
    explicit sequence is normalised and used as is.
    """
    if isinstance(prior_weights, str):
        if prior_weights == "prior":
            log_p = np.array([t.log_prior for t in trees])
        elif prior_weights == "sample":
            log_p = np.log([t.count for t in trees])
        else:
            raise ValueError("prior_weights must be 'prior', 'sample', or a sequence")
    else:
        p = np.asarray(prior_weights, dtype=float)
        if len(p) != len(trees) or np.any(p < 0):
            raise ValueError("need one nonnegative prior weight per tree")
        with np.errstate(divide="ignore"):
            log_p = np.log(p)
    log_p = log_p - logsumexp(log_p)
    return float(logsumexp(log_p + np.array([t.log_evidence for t in trees])))


def compose(
    dataset: ChoiceDataset,
    spec: UtilitySpec,
    bins,
    sample: TreeSample,
    k: int = 10,
    quotas: tuple[float, float] = (0.3, 0.3),
    prior: PriorSpec = PriorSpec(),
    policy: str = "data",
    n_draws: int = 2000,
    df: float = 5.0,
    seed: int = 0,
    starts: int = 4,
) -> TreePosterior:
    """Select, fit, and reweight trees in one call (each tree gets its own seed stream)."""
    idx = select_tree_indices(sample, k, quotas)
    seeds = np.random.SeedSequence(seed).generate_state(len(idx))
    trees = [
        fit_tree(dataset, spec, bins, sample.lists[i], prior, policy, n_draws=n_draws, df=df,
                 seed=int(s), starts=starts, count=int(sample.counts[i]),
                 log_prior=float(sample.log_priors[i]), log_label_lik=float(sample.log_liks[i]))
        for i, s in zip(idx, seeds)
    ]
    return reweight_trees(trees, spec, bins, {"k": k, "n_distinct": len(sample), "policy": policy})
