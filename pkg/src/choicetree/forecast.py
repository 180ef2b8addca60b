"""Policy sweeps: expected mode shares as one attribute is raised across a grid.

At each grid value every observation's attribute becomes
``max(current, value)``, node memberships are recomputed, and mode shares
are evaluated for every (tree, posterior draw) pair.  The curve reports the
posterior mean share and equal-tailed credible bounds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .choice import build_design, share_draws
from .data import ChoiceDataset, SchemaError, binarize
from .model_tree import TreePosterior
from .rulelist import assign_nodes


@dataclass(frozen=True)
class SweepSpec:
    """``clamp`` caps the grid value applied to an observation; values
    already above it are left alone."""

    variable: str
    grid: tuple[float, ...]
    clamp: float | None = None

    def __post_init__(self):
        g = tuple(float(x) for x in self.grid)
        if not g:
            raise ValueError("empty sweep grid")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("sweep grid must be strictly increasing")
        object.__setattr__(self, "grid", g)

    @classmethod
    def arange(cls, variable: str, start: float, stop: float, step: float, clamp: float | None = None) -> "SweepSpec":
        """Grid ``start, start + step, ...`` up to ``stop`` inclusive (rounded to 12 decimals)."""
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return cls(variable, tuple(round(start + i * step, 12) for i in range(n)), clamp)

    def raise_to(self, x: np.ndarray, value: float) -> np.ndarray:
        target = value if self.clamp is None else min(value, self.clamp)
        return np.where(np.isnan(x), x, np.maximum(x, target))


@dataclass(frozen=True, eq=False)
class ForecastCurve:
    variable: str
    grid: np.ndarray
    alternatives: tuple[str, ...]
    mean: np.ndarray          # (n_grid, n_alts)
    lower: np.ndarray
    upper: np.ndarray
    samples: np.ndarray       # (n_grid, n_pairs, n_alts) share per (tree, draw) pair
    weights: np.ndarray       # (n_pairs,)

    def share(self, alternative: str) -> np.ndarray:
        return self.mean[:, self.alternatives.index(alternative)]


def weighted_quantile(values: np.ndarray, q, weights: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inverse of the weighted empirical CDF (no interpolation)."""
    return np.quantile(values, q, axis=axis, weights=weights, method="inverted_cdf")


def mode_share(probabilities: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Share of each alternative: the (optionally weighted) mean probability over observations."""
    P = np.asarray(probabilities, dtype=float)
    if weights is None:
        return P.mean(axis=0)
    w = np.asarray(weights, dtype=float)
    return w @ P / w.sum()


def interval_width_profile(curve: ForecastCurve, alternative: str | None = None) -> np.ndarray:
    """Upper minus lower bound per grid point (all alternatives, or one)."""
    width = curve.upper - curve.lower
    if alternative is None:
        return width
    return width[:, curve.alternatives.index(alternative)]


def systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` equally weighted draws representing ``weights``."""
    c = np.cumsum(weights)
    c /= c[-1]
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(c, u, side="left"), len(weights) - 1)


def _draw_sets(tp: TreePosterior, max_draws: int | None, seed: int):
    """Per tree: parameter draws and their weights (resampled when there are too many)."""
    rng = np.random.default_rng(seed)
    out = []
    for tree in tp.trees:
        ev = tree.evidence
        if max_draws is not None and ev.n_draws > max_draws:
            idx = systematic_resample(ev.weights, max_draws, rng)
            out.append((ev.draws[idx], np.full(max_draws, 1.0 / max_draws)))
        else:
            out.append((ev.draws, ev.weights))
    return out


def sweep(
    model: TreePosterior,
    dataset: ChoiceDataset,
    spec: SweepSpec,
    max_draws: int | None = 500,
    seed: int = 0,
    level: float = 0.95,
) -> ForecastCurve:
    """Forecast curve for ``model`` (a model-tree posterior or the plain MNL)."""
    schema = dataset.schema
    if not schema.has_column(spec.variable):
        raise SchemaError(f"sweep variable {spec.variable!r} is not in the dataset")
    col = schema.column(spec.variable)
    in_utility = spec.variable in model.spec.columns
    if not (col.is_tree_feature or col.is_utility_covariate):
        raise SchemaError(f"sweep variable {spec.variable!r} is neither a tree feature nor a utility covariate")
    draws = _draw_sets(model, max_draws, seed)
    pair_w = np.concatenate([w_m * w for w_m, (_, w) in zip(model.weights, draws)])
    base = dataset.column(spec.variable)
    G, J = len(spec.grid), dataset.n_alts
    samples = np.empty((G, len(pair_w), J))
    cache: dict[tuple[int, bytes], np.ndarray] = {}
    for gi, value in enumerate(spec.grid):
        ds = dataset.with_values(spec.variable, spec.raise_to(base, value))
        X = binarize(ds, model.bins) if model.bins else None
        blocks = []
        for ti, (tree, (thetas, _)) in enumerate(zip(model.trees, draws)):
            nodes = None if tree.rule_list is None else assign_nodes(tree.rule_list, X)
            key = None
            if not in_utility:
                # the shares depend on the swept variable only through node membership
                key = (ti, b"" if nodes is None else nodes.tobytes())
                if key in cache:
                    blocks.append(cache[key])
                    continue
            design = build_design(ds, model.spec, nodes, tree.flags if nodes is not None else None)
            s = share_draws(thetas, design)
            if key is not None:
                cache[key] = s
            blocks.append(s)
        samples[gi] = np.concatenate(blocks, axis=0)
    mean = np.einsum("p,gpj->gj", pair_w, samples)
    tail = (1.0 - level) / 2
    lo, hi = weighted_quantile(samples, [tail, 1.0 - tail], pair_w, axis=1)
    return ForecastCurve(spec.variable, np.array(spec.grid), schema.alt_names, mean, lo, hi, samples, pair_w)


def write_curve(curve: ForecastCurve, path, header: Sequence[str] = ()) -> None:
    """One row per (grid value, alternative): value, alternative, mean, lower, upper."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([curve.variable, "alternative", "mean_share", "lower", "upper"])
        for gi, g in enumerate(curve.grid):
            for j, name in enumerate(curve.alternatives):
                w.writerow([repr(float(g)), name, repr(float(curve.mean[gi, j])),
                            repr(float(curve.lower[gi, j])), repr(float(curve.upper[gi, j]))])
