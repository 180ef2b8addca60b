"""Candidate antecedents: conjunctions of requirements with enough support.

Support is counted separately among rows where the gated alternative was
chosen (positives) and where it was not (negatives); a conjunction is kept
when either class clears its threshold.  :func:`mine_conjunctions` runs
FP-growth on each class; :func:`brute_force_mine` enumerates every
conjunction and exists to check it.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import BinnedMatrix, Requirement


class MiningError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Conjunction:
    """Sorted requirement ids joined by AND."""

    items: tuple[int, ...]

    def __post_init__(self):
        items = tuple(sorted(int(i) for i in self.items))
        if not items:
            raise ValueError("a conjunction needs at least one requirement")
        if len(set(items)) != len(items):
            raise ValueError("duplicate requirement in conjunction")
        object.__setattr__(self, "items", items)

    @property
    def cardinality(self) -> int:
        return len(self.items)

    def key(self) -> tuple:
        return (self.cardinality, self.items)

    def label(self, requirements: Sequence[Requirement]) -> str:
        return " & ".join(requirements[i].label for i in self.items)


def parse_conjunction(text: str, label_index: dict[str, int]) -> Conjunction:
    ids = []
    for part in text.split("&"):
        part = part.strip()
        if part not in label_index:
            raise MiningError(f"unknown requirement {part!r}")
        ids.append(label_index[part])
    return Conjunction(tuple(ids))


def matches(conj: Conjunction, row) -> bool:
    """True iff every requirement bit of ``conj`` is set in ``row``."""
    row = np.asarray(row, dtype=bool)
    for i in conj.items:
        if not 0 <= i < row.shape[-1]:
            raise MiningError(f"requirement {i} is not in the matrix")
    return bool(row[list(conj.items)].all())


def match_matrix(conjs: Sequence[Conjunction], X: np.ndarray) -> np.ndarray:
    """(n_rows, n_conjunctions) boolean matrix of matches."""
    X = np.asarray(X, dtype=bool)
    out = np.ones((X.shape[0], len(conjs)), dtype=bool)
    for k, c in enumerate(conjs):
        for i in c.items:
            if not 0 <= i < X.shape[1]:
                raise MiningError(f"requirement {i} is not in the matrix")
            out[:, k] &= X[:, i]
    return out


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Mined antecedents in canonical order (cardinality, then requirement ids)."""

    conjunctions: tuple[Conjunction, ...]
    pos_counts: np.ndarray
    neg_counts: np.ndarray
    n_pos: int
    n_neg: int
    requirements: tuple[Requirement, ...]

    def __len__(self) -> int:
        return len(self.conjunctions)

    def __iter__(self):
        return iter(self.conjunctions)

    def __contains__(self, conj) -> bool:
        return conj in self._index

    @property
    def _index(self) -> dict[Conjunction, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {c: k for k, c in enumerate(self.conjunctions)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def index(self, conj: Conjunction) -> int:
        try:
            return self._index[conj]
        except KeyError:
            raise MiningError(f"antecedent {conj.label(self.requirements)!r} is not a candidate") from None

    def cardinality_counts(self) -> dict[int, int]:
        """L_c: number of candidates of each cardinality."""
        return dict(sorted(Counter(c.cardinality for c in self.conjunctions).items()))

    def by_cardinality(self) -> dict[int, list[Conjunction]]:
        out: dict[int, list[Conjunction]] = {}
        for c in self.conjunctions:
            out.setdefault(c.cardinality, []).append(c)
        return out

    def labels(self) -> list[str]:
        return [c.label(self.requirements) for c in self.conjunctions]

    def same_as(self, other: "CandidateSet") -> bool:
        return self.conjunctions == other.conjunctions


def min_count(threshold: float, n: int) -> int:
    """Smallest count whose fraction of ``n`` reaches ``threshold``."""
    return max(1, math.ceil(threshold * n - 1e-9))


def _check_inputs(bm: BinnedMatrix, max_card: int, min_support_pos: float, min_support_neg: float):
    if max_card < 1:
        raise MiningError("max_card must be at least 1")
    for t in (min_support_pos, min_support_neg):
        if not 0 < t <= 1:
            raise MiningError("support thresholds must lie in (0, 1]")
    if bm.n_rows == 0 or bm.n_requirements == 0:
        raise MiningError("empty requirement matrix")
    n_pos = int(bm.labels.sum())
    n_neg = bm.n_rows - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MiningError(
            f"labels have {n_pos} positive and {n_neg} negative rows; both classes need members "
            "(check the gated alternative and the subsample column)"
        )
    return n_pos, n_neg


def _finish(bm, found: Iterable[tuple[int, ...]], n_pos, n_neg) -> CandidateSet:
    group = bm.feature_of()
    conjs = sorted(
        {Conjunction(items) for items in found if len(set(group[list(items)])) == len(items)},
        key=Conjunction.key,
    )
    M = match_matrix(conjs, bm.X)
    pos = M[bm.labels].sum(axis=0).astype(np.int64)
    neg = M[~bm.labels].sum(axis=0).astype(np.int64)
    return CandidateSet(tuple(conjs), pos, neg, n_pos, n_neg, bm.requirements)


# ---------------------------------------------------------------------------
# FP-growth


class _Node:
    __slots__ = ("item", "count", "parent", "children")

    def __init__(self, item, parent):
        self.item = item
        self.count = 0
        self.parent = parent
        self.children: dict[int, _Node] = {}


def _build_tree(transactions: list[tuple[tuple[int, ...], int]], min_cnt: int):
    counts: Counter = Counter()
    for items, w in transactions:
        for i in items:
            counts[i] += w
    frequent = {i: c for i, c in counts.items() if c >= min_cnt}
    rank = {i: r for r, i in enumerate(sorted(frequent, key=lambda i: (-frequent[i], i)))}
    root = _Node(None, None)
    header: dict[int, list[_Node]] = {i: [] for i in frequent}
    for items, w in transactions:
        path = sorted((i for i in items if i in rank), key=rank.__getitem__)
        node = root
        for i in path:
            child = node.children.get(i)
            if child is None:
                child = _Node(i, node)
                node.children[i] = child
                header[i].append(child)
            child.count += w
            node = child
    return header, frequent, rank


def _mine(transactions, min_cnt: int, max_len: int, suffix: tuple[int, ...], out: dict):
    header, frequent, rank = _build_tree(transactions, min_cnt)
    for item in sorted(frequent, key=lambda i: -rank[i]):
        pattern = suffix + (item,)
        out[tuple(sorted(pattern))] = frequent[item]
        if len(pattern) >= max_len:
            continue
        base = []
        for node in header[item]:
            prefix = []
            p = node.parent
            while p is not None and p.item is not None:
                prefix.append(p.item)
                p = p.parent
            if prefix:
                base.append((tuple(prefix), node.count))
        if base:
            _mine(base, min_cnt, max_len, pattern, out)


def fp_growth(transactions: Iterable[Iterable[int]], min_cnt: int, max_len: int) -> dict[tuple[int, ...], int]:
    """Frequent itemsets (sorted tuples) with their counts, up to ``max_len`` items."""
    tx = [(tuple(t), 1) for t in transactions]
    out: dict[tuple[int, ...], int] = {}
    if tx:
        _mine(tx, min_cnt, max_len, (), out)
    return out


def _transactions(X: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(np.flatnonzero(r).tolist()) for r in X]


def mine_conjunctions(
    bm: BinnedMatrix,
    max_card: int = 2,
    min_support_pos: float = 0.10,
    min_support_neg: float = 0.10,
) -> CandidateSet:
    """Conjunctions of at most ``max_card`` requirements with support among
    positives >= ``min_support_pos`` or among negatives >= ``min_support_neg``."""
    n_pos, n_neg = _check_inputs(bm, max_card, min_support_pos, min_support_neg)
    found = set(fp_growth(_transactions(bm.X[bm.labels]), min_count(min_support_pos, n_pos), max_card))
    found |= set(fp_growth(_transactions(bm.X[~bm.labels]), min_count(min_support_neg, n_neg), max_card))
    return _finish(bm, found, n_pos, n_neg)


def brute_force_mine(
    bm: BinnedMatrix,
    max_card: int = 2,
    min_support_pos: float = 0.10,
    min_support_neg: float = 0.10,
    cap: int = 2_000_000,
) -> CandidateSet:
    """Exhaustive enumeration of every conjunction; refuses beyond ``cap`` combinations."""
    n_pos, n_neg = _check_inputs(bm, max_card, min_support_pos, min_support_neg)
    R = bm.n_requirements
    total = sum(math.comb(R, c) for c in range(1, min(max_card, R) + 1))
    if total > cap:
        raise MiningError(f"brute force would enumerate {total} conjunctions (cap {cap})")
    Xp = bm.X[bm.labels]
    Xn = bm.X[~bm.labels]
    need_p = min_count(min_support_pos, n_pos)
    need_n = min_count(min_support_neg, n_neg)
    found = []
    for c in range(1, min(max_card, R) + 1):
        for items in combinations(range(R), c):
            cols = list(items)
            if Xp[:, cols].all(axis=1).sum() >= need_p or Xn[:, cols].all(axis=1).sum() >= need_n:
                found.append(items)
    return _finish(bm, found, n_pos, n_neg)


# ---------------------------------------------------------------------------
# Text format


def write_candidates(cands: CandidateSet, path, header: Sequence[str] = ()) -> None:
    """One conjunction per line: ``cardinality<TAB>conjunction<TAB>pos<TAB>neg``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        fh.write(f"# n_pos={cands.n_pos} n_neg={cands.n_neg}\n")
        fh.write("cardinality\tconjunction\tpos_count\tneg_count\n")
        for c, p, n in zip(cands.conjunctions, cands.pos_counts, cands.neg_counts):
            fh.write(f"{c.cardinality}\t{c.label(cands.requirements)}\t{int(p)}\t{int(n)}\n")


def read_candidates(path, requirements: Sequence[Requirement]) -> tuple[CandidateSet, dict[str, str]]:
    """Parse a candidate file; returns the set and its ``# key=value`` header fields."""
    label_index = {r.label: r.index for r in requirements}
    meta: dict[str, str] = {}
    conjs, pos, neg = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
            continue
        if line.startswith("cardinality\t") or not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise MiningError(f"malformed candidate line {line!r}")
        conj = parse_conjunction(fields[1], label_index)
        if conj.cardinality != int(fields[0]):
            raise MiningError(f"cardinality mismatch on line {line!r}")
        conjs.append(conj)
        pos.append(int(fields[2]))
        neg.append(int(fields[3]))
    cs = CandidateSet(
        tuple(conjs),
        np.array(pos, dtype=np.int64),
        np.array(neg, dtype=np.int64),
        int(meta.get("n_pos", 0)),
        int(meta.get("n_neg", 0)),
        tuple(requirements),
    )
    return cs, meta
