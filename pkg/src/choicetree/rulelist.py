"""Bayesian rule lists over mined antecedents.

A rule list is an ordered tuple of antecedents followed by an implicit
default node.  Rows fall into the first antecedent they match.  The prior
has three parts: a truncated Poisson on the list length, a truncated
Poisson on each antecedent's cardinality (truncated to the cardinalities
that still have unused candidates), and a uniform choice among the unused
candidates of that cardinality.  Each node carries a Beta prior on the
probability that the gated alternative is chosen.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from itertools import permutations, combinations
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import betaln, gammaln, logsumexp

from .data import BinnedMatrix, Requirement
from .mining import CandidateSet, Conjunction, MiningError, match_matrix, parse_conjunction


@dataclass(frozen=True, order=True)
class RuleList:
    antecedents: tuple[Conjunction, ...] = ()

    def __post_init__(self):
        ants = tuple(self.antecedents)
        if len(set(ants)) != len(ants):
            raise ValueError("duplicate antecedent in rule list")
        object.__setattr__(self, "antecedents", ants)

    def __len__(self) -> int:
        return len(self.antecedents)

    @property
    def n_nodes(self) -> int:
        return len(self.antecedents) + 1

    def key(self) -> tuple:
        return (len(self), tuple(c.key() for c in self.antecedents))

    def labels(self, requirements: Sequence[Requirement]) -> list[str]:
        return [c.label(requirements) for c in self.antecedents]

    def describe(self, requirements: Sequence[Requirement]) -> str:
        if not self.antecedents:
            return "(empty list)"
        return " | ".join(self.labels(requirements))

    @classmethod
    def from_labels(cls, labels: Iterable[str], requirements: Sequence[Requirement]) -> "RuleList":
        index = {r.label: r.index for r in requirements}
        return cls(tuple(parse_conjunction(s, index) for s in labels))


@dataclass(frozen=True)
class RuleListPrior:
    lambda_len: float = 5.0
    lambda_card: float = 2.0
    beta_a: float = 1.0
    beta_b: float = 1.0

    def __post_init__(self):
        for k in ("lambda_len", "lambda_card", "beta_a", "beta_b"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")


def default_d_max(n_candidates: int, cap: int = 20) -> int:
    return min(n_candidates, cap)


def truncated_poisson_logpmf(k: int, lam: float, support: Iterable[int]) -> float:
    """log Poisson(k; lam) renormalised over ``support``; -inf outside it."""
    support = sorted(set(int(s) for s in support))
    if k not in support:
        return -math.inf
    s = np.asarray(support, dtype=float)
    logp = s * math.log(lam) - lam - gammaln(s + 1)
    return float(k * math.log(lam) - lam - gammaln(k + 1) - logsumexp(logp))


# ---------------------------------------------------------------------------
# Node assignment and label evidence


def assign_node(rl: RuleList, row) -> int:
    """Index of the first antecedent the row satisfies; ``len(rl)`` for the default node."""
    row = np.asarray(row, dtype=bool)
    for k, conj in enumerate(rl.antecedents):
        if row[list(conj.items)].all():
            return k
    return len(rl)


def assign_nodes(rl: RuleList, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=bool)
    nodes = np.full(X.shape[0], len(rl), dtype=np.int64)
    free = np.ones(X.shape[0], dtype=bool)
    if rl.antecedents:
        M = match_matrix(rl.antecedents, X)
        for k in range(len(rl)):
            hit = free & M[:, k]
            nodes[hit] = k
            free &= ~hit
    return nodes


def node_counts(rl: RuleList, bm: BinnedMatrix) -> tuple[np.ndarray, np.ndarray]:
    """(n1, n0) per node: rows choosing / not choosing the gated alternative."""
    nodes = assign_nodes(rl, bm.X)
    n1 = np.bincount(nodes[bm.labels], minlength=rl.n_nodes)
    n0 = np.bincount(nodes[~bm.labels], minlength=rl.n_nodes)
    return n1, n0


def _beta_evidence(n1, n0, a: float, b: float):
    return betaln(a + np.asarray(n1), b + np.asarray(n0)) - betaln(a, b)


def log_marginal_labels(rl: RuleList, bm: BinnedMatrix, prior: RuleListPrior = RuleListPrior()) -> float:
    """Beta-Bernoulli evidence of the labels given the partition, summed over nodes."""
    n1, n0 = node_counts(rl, bm)
    return float(_beta_evidence(n1, n0, prior.beta_a, prior.beta_b).sum())


def node_label_posterior(rl: RuleList, bm: BinnedMatrix, prior: RuleListPrior = RuleListPrior()) -> np.ndarray:
    """Posterior Beta parameters, one row ``(a + n1, b + n0)`` per node."""
    n1, n0 = node_counts(rl, bm)
    return np.column_stack([prior.beta_a + n1, prior.beta_b + n0]).astype(float)


def log_prior(
    rl: RuleList,
    prior: RuleListPrior,
    cands: CandidateSet,
    d_max: int | None = None,
) -> float:
    for conj in rl.antecedents:
        if conj not in cands:
            raise MiningError(f"antecedent {conj.label(cands.requirements)!r} is not a candidate")
    return _log_prior_cards([c.cardinality for c in rl.antecedents], prior, cands.cardinality_counts(),
                            _resolve_d_max(d_max, len(cands)))


def _resolve_d_max(d_max: int | None, pool: int) -> int:
    return default_d_max(pool) if d_max is None else min(int(d_max), pool)


def _log_prior_cards(cards: Sequence[int], prior: RuleListPrior, pool: dict[int, int], d_max: int) -> float:
    lp = truncated_poisson_logpmf(len(cards), prior.lambda_len, range(d_max + 1))
    if lp == -math.inf:
        return lp
    remaining = dict(pool)
    for c in cards:
        left = remaining.get(c, 0)
        if left <= 0:
            return -math.inf
        avail = [k for k, v in remaining.items() if v > 0]
        lp += truncated_poisson_logpmf(c, prior.lambda_card, avail) - math.log(left)
        remaining[c] = left - 1
    return lp


def enumerate_rule_lists(cands: CandidateSet, d_max: int | None = None) -> Iterator[RuleList]:
    """Every ordered list of distinct candidates up to ``d_max`` long."""
    d_max = _resolve_d_max(d_max, len(cands))
    for L in range(d_max + 1):
        for combo in combinations(cands.conjunctions, L):
            for perm in permutations(combo):
                yield RuleList(perm)


# ---------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True, eq=False)
class TreeSample:
    """Distinct rule lists visited after burn-in, with visit counts S_m."""

    lists: tuple[RuleList, ...]
    counts: np.ndarray
    log_priors: np.ndarray
    log_liks: np.ndarray
    n_iter: int = 0
    burn_in: int = 0
    thin: int = 1
    n_chains: int = 1
    acceptance_rate: float = math.nan
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.lists)

    @property
    def log_posteriors(self) -> np.ndarray:
        return self.log_priors + self.log_liks

    @property
    def n_retained(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def mode(self) -> RuleList:
        """Most visited list; ties go to the canonically smallest."""
        order = sorted(range(len(self)), key=lambda i: (-self.counts[i], self.lists[i].key()))
        return self.lists[order[0]]

    def mean_length(self) -> float:
        return float(np.dot(self.frequencies(), [len(rl) for rl in self.lists]))

    def to_dict(self, requirements: Sequence[Requirement]) -> dict:
        return {
            "n_iter": self.n_iter,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "n_chains": self.n_chains,
            "acceptance_rate": self.acceptance_rate,
            "seed": self.seed,
            "lists": [
                {
                    "antecedents": rl.labels(requirements),
                    "count": int(c),
                    "log_prior": float(lp),
                    "log_lik": float(ll),
                }
                for rl, c, lp, ll in zip(self.lists, self.counts, self.log_priors, self.log_liks)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, requirements: Sequence[Requirement]) -> "TreeSample":
        recs = d["lists"]
        return cls(
            tuple(RuleList.from_labels(r["antecedents"], requirements) for r in recs),
            np.array([r["count"] for r in recs], dtype=np.int64),
            np.array([r["log_prior"] for r in recs], dtype=float),
            np.array([r["log_lik"] for r in recs], dtype=float),
            n_iter=d["n_iter"],
            burn_in=d["burn_in"],
            thin=d["thin"],
            n_chains=d["n_chains"],
            acceptance_rate=d["acceptance_rate"],
            seed=d.get("seed"),
        )


class _Scorer:
    """Log prior and label evidence of candidate-index tuples, via row bitsets."""

    def __init__(self, bm: BinnedMatrix, cands: CandidateSet, prior: RuleListPrior, d_max: int):
        M = match_matrix(cands.conjunctions, bm.X)
        self.masks = [_bits(M[:, k]) for k in range(len(cands))]
        self.pos = _bits(bm.labels)
        self.all = (1 << bm.n_rows) - 1
        self.cards = [c.cardinality for c in cands.conjunctions]
        self.pool = cands.cardinality_counts()
        self.prior = prior
        self.d_max = d_max
        self.base = float(betaln(prior.beta_a, prior.beta_b))
        self.cache: dict[tuple[int, ...], tuple[float, float]] = {}

    def score(self, state: tuple[int, ...]) -> tuple[float, float]:
        hit = self.cache.get(state)
        if hit is not None:
            return hit
        a, b = self.prior.beta_a, self.prior.beta_b
        free = self.all
        ll = 0.0
        for k in state:
            cap = free & self.masks[k]
            n = cap.bit_count()
            n1 = (cap & self.pos).bit_count()
            ll += betaln(a + n1, b + n - n1) - self.base
            free &= ~cap
        n = free.bit_count()
        n1 = (free & self.pos).bit_count()
        ll += betaln(a + n1, b + n - n1) - self.base
        lp = _log_prior_cards([self.cards[k] for k in state], self.prior, self.pool, self.d_max)
        out = (lp, float(ll))
        self.cache[state] = out
        return out


def _bits(mask: np.ndarray) -> int:
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return 0
    return int.from_bytes(np.packbits(mask[::-1]).tobytes(), "big") >> ((-mask.size) % 8)


def _move_probs(L: int, pool: int, d_max: int, weights) -> tuple[float, float, float]:
    w_ins = weights[0] if (L < d_max and L < pool) else 0.0
    w_rem = weights[1] if L >= 1 else 0.0
    w_mov = weights[2] if L >= 2 else 0.0
    tot = w_ins + w_rem + w_mov
    if tot == 0:
        return (0.0, 0.0, 0.0)
    return (w_ins / tot, w_rem / tot, w_mov / tot)


def _run_chain(scorer: _Scorer, n_cands: int, d_max: int, n_iter: int, burn_in: int, thin: int,
               weights, rng: np.random.Generator, init: tuple[int, ...]):
    state = init
    lp, ll = scorer.score(state)
    cur = lp + ll
    counts: Counter = Counter()
    accepted = 0
    proposed = 0
    for it in range(n_iter):
        L = len(state)
        p_ins, p_rem, p_mov = _move_probs(L, n_cands, d_max, weights)
        u = rng.random()
        if p_ins + p_rem + p_mov > 0:
            proposed += 1
            if u < p_ins:
                used = set(state)
                unused = [k for k in range(n_cands) if k not in used]
                a = unused[int(rng.integers(len(unused)))]
                pos = int(rng.integers(L + 1))
                new = state[:pos] + (a,) + state[pos:]
                log_fwd = math.log(p_ins) - math.log(len(unused)) - math.log(L + 1)
                log_rev = math.log(_move_probs(L + 1, n_cands, d_max, weights)[1]) - math.log(L + 1)
            elif u < p_ins + p_rem:
                pos = int(rng.integers(L))
                new = state[:pos] + state[pos + 1:]
                log_fwd = math.log(p_rem) - math.log(L)
                p_ins_back = _move_probs(L - 1, n_cands, d_max, weights)[0]
                log_rev = math.log(p_ins_back) - math.log(n_cands - (L - 1)) - math.log(L)
            else:
                i = int(rng.integers(L))
                j = int(rng.integers(L - 1))
                if j >= i:
                    j += 1
                lst = list(state)
                a = lst.pop(i)
                lst.insert(j, a)
                new = tuple(lst)
                # an adjacent swap is reachable from two (i, j) pairs, in both directions
                pairs = 2 if abs(i - j) == 1 else 1
                log_fwd = math.log(p_mov) + math.log(pairs) - math.log(L * (L - 1))
                log_rev = math.log(_move_probs(L, n_cands, d_max, weights)[2]) + math.log(pairs) - math.log(L * (L - 1))
            nlp, nll = scorer.score(new)
            prop = nlp + nll
            log_alpha = prop - cur + log_rev - log_fwd
            if log_alpha >= 0 or math.log(rng.random()) < log_alpha:
                state, cur = new, prop
                accepted += 1
        if it >= burn_in and (it - burn_in) % thin == 0:
            counts[state] += 1
    rate = accepted / proposed if proposed else 0.0
    return counts, rate, proposed


def sample_rule_lists(
    bm: BinnedMatrix,
    cands: CandidateSet,
    prior: RuleListPrior = RuleListPrior(),
    n_iter: int = 20_000,
    burn_in: int | None = None,
    thin: int = 1,
    seed: int = 0,
    n_chains: int = 1,
    d_max: int | None = None,
    move_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> TreeSample:
    """Metropolis-Hastings over rule lists; chains start empty and are merged by summing counts.

    Moves: insert an unused candidate at a uniform position, remove a uniform
    position, or move one antecedent to a new position.  Acceptance uses the
    exact proposal densities of each move.
    """
    if len(cands) == 0:
        raise MiningError("candidate set is empty")
    if burn_in is None:
        burn_in = n_iter // 5
    if not n_iter > burn_in >= 0:
        raise ValueError("need n_iter > burn_in >= 0")
    if thin < 1:
        raise ValueError("thin must be at least 1")
    d_max = _resolve_d_max(d_max, len(cands))
    scorer = _Scorer(bm, cands, prior, d_max)
    total: Counter = Counter()
    rates = []
    proposed = 0
    for child in np.random.SeedSequence(seed).spawn(n_chains):
        rng = np.random.default_rng(child)
        counts, rate, n_prop = _run_chain(scorer, len(cands), d_max, n_iter, burn_in, thin, move_weights, rng, ())
        total.update(counts)
        rates.append(rate)
        proposed += n_prop
    if proposed == 0:
        warnings.warn("no move is possible from the initial state; the chain never left it", stacklevel=2)
    states = sorted(total, key=lambda s: RuleList(tuple(cands.conjunctions[k] for k in s)).key())
    lists = tuple(RuleList(tuple(cands.conjunctions[k] for k in s)) for s in states)
    scores = [scorer.score(s) for s in states]
    return TreeSample(
        lists,
        np.array([total[s] for s in states], dtype=np.int64),
        np.array([s[0] for s in scores], dtype=float),
        np.array([s[1] for s in scores], dtype=float),
        n_iter=n_iter,
        burn_in=burn_in,
        thin=thin,
        n_chains=n_chains,
        acceptance_rate=float(np.mean(rates)),
        seed=seed,
    )


def write_tree_sample(sample: TreeSample, path, requirements, meta: dict | None = None) -> None:
    doc = {"meta": meta or {}, "sample": sample.to_dict(requirements)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_tree_sample(path, requirements) -> tuple[TreeSample, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return TreeSample.from_dict(doc["sample"], requirements), doc.get("meta", {})
