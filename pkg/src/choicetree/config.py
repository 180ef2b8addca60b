"""Run configuration: a TOML file layered over defaults.

Every default reproduces the reference settings (rule-list rates 5 and 2,
Beta(1, 1) node priors, N(0, 4) coefficient priors, maximum cardinality 2,
10% support thresholds, ten selected trees), so an empty file is a valid
configuration.  Schema, bins, and utility default to the bicycle preset.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .choice import PriorSpec, Term, UtilitySpec
from .data import Alternative, Bins, Column, FeatureSchema, SchemaError
from .rulelist import RuleListPrior
from .synth import TREE_FEATURES, bicycle_bins, bicycle_schema, bicycle_utility


class ConfigError(ValueError):
    pass


def _enc(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _preset_sections() -> dict:
    schema = bicycle_schema()
    return {
        "schema": {
            "gated": schema.gated,
            "subsample": schema.subsample,
            "alternatives": [{"id": a.id, "name": a.name, "always_available": a.always_available}
                             for a in schema.alternatives],
            "columns": [{"name": c.name, "level": c.level, "role": c.role, "unit": c.unit} for c in schema.columns],
        },
        "bins": {b.feature: [_enc(e) for e in b.edges] for b in bicycle_bins()},
        "utility": {
            "terms": [[t.alt, t.coef] + ([t.column] if t.column else []) for t in bicycle_utility().terms],
            "baseline_gated_columns": list(TREE_FEATURES),
        },
    }


DEFAULTS: dict = {
    "seed": 0,
    "data": {"path": ""},
    "synth": {"preset": "bicycle", "n": 2000},
    "mining": {"max_card": 2, "min_support_pos": 0.10, "min_support_neg": 0.10},
    "rule_prior": {"lambda_len": 5.0, "lambda_card": 2.0, "beta_a": 1.0, "beta_b": 1.0},
    "sampler": {"n_iter": 20000, "burn_in_fraction": 0.2, "thin": 1, "chains": 1, "d_max": 20},
    "selection": {"k": 10, "quota_posterior": 0.3, "quota_likelihood": 0.3},
    "choice_prior": {"variance": 4.0, "log_var_scale": 2.0},
    "evidence": {"n_draws": 2000, "df": 5.0, "starts": 4, "consider_policy": "data", "prior_weights": "prior"},
    "sweep": {"variable": "bike_lanes", "start": 0.0, "stop": 0.70, "step": 0.01, "clamp": "none", "max_draws": 500},
    "compare": {"prior_tree": 0.5},
    **_preset_sections(),
}

# Sections each stage depends on (its own and everything upstream).
STAGE_SECTIONS = {
    "synth": ("seed", "synth"),
    "mine": ("data", "schema", "bins", "mining"),
    "sample": ("data", "schema", "bins", "mining", "rule_prior", "sampler", "seed"),
    "fit": ("data", "schema", "bins", "mining", "rule_prior", "sampler", "seed",
            "selection", "utility", "choice_prior", "evidence"),
    "forecast": ("data", "schema", "bins", "mining", "rule_prior", "sampler", "seed",
                 "selection", "utility", "choice_prior", "evidence", "sweep"),
    "compare": ("data", "schema", "bins", "mining", "rule_prior", "sampler", "seed",
                "selection", "utility", "choice_prior", "evidence", "compare"),
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {where + k!r}")
        if isinstance(base[k], dict) and k not in ("bins",):
            if not isinstance(v, dict):
                raise ConfigError(f"{where + k!r} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """Resolved configuration plus typed accessors for each stage."""

    def __init__(self, raw: dict, base_dir: Path = Path(".")):
        self.raw = raw
        self.base_dir = Path(base_dir)
        self._validate()

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        raw: dict = {}
        base = Path(".")
        if path is not None:
            path = Path(path)
            with open(path, "rb") as fh:
                try:
                    raw = tomllib.load(fh)
                except tomllib.TOMLDecodeError as e:
                    raise ConfigError(f"{path}: {e}") from None
            base = path.parent
        merged = _merge(DEFAULTS, raw)
        for k, v in (overrides or {}).items():
            merged[k] = v
        return cls(merged, base)

    def _validate(self):
        try:
            self.schema()
            self.bins()
            self.utility().validate(self.schema())
            self.baseline_utility().validate(self.schema())
            self.rule_prior()
            self.choice_prior()
        except (SchemaError, TypeError, KeyError) as e:
            raise ConfigError(f"invalid configuration: {e}") from None
        if self.raw["evidence"]["consider_policy"] not in ("data", "all"):
            raise ConfigError("evidence.consider_policy must be 'data' or 'all'")
        if self.raw["evidence"]["prior_weights"] not in ("prior", "sample"):
            raise ConfigError("evidence.prior_weights must be 'prior' or 'sample'")
        s = self.raw["sampler"]
        if not (s["n_iter"] >= 1 and 0 <= s["burn_in_fraction"] < 1 and s["thin"] >= 1 and s["chains"] >= 1):
            raise ConfigError("invalid sampler settings")
        if self.raw["selection"]["k"] < 1:
            raise ConfigError("selection.k must be at least 1")
        if not 0 < self.raw["compare"]["prior_tree"] < 1:
            raise ConfigError("compare.prior_tree must lie in (0, 1)")

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def section(self, name: str) -> dict:
        return self.raw[name]

    def schema(self) -> FeatureSchema:
        s = self.raw["schema"]
        return FeatureSchema(
            tuple(Alternative(int(a["id"]), a["name"], bool(a.get("always_available", False))) for a in s["alternatives"]),
            tuple(Column(c["name"], c.get("level", "person"), c.get("role", "utility"), c.get("unit", "")) for c in s["columns"]),
            gated=s.get("gated") or None,
            subsample=s.get("subsample") or None,
        )

    def bins(self) -> tuple[Bins, ...]:
        out = []
        for feature, spec in self.raw["bins"].items():
            if spec and isinstance(spec[0], list):
                out.append(Bins(feature, categories=tuple(tuple(c) for c in spec)))
            else:
                out.append(Bins(feature, edges=tuple(float(e) for e in spec)))
        schema = self.schema()
        for f in schema.tree_features:
            if f not in {b.feature for b in out}:
                raise SchemaError(f"tree feature {f!r} has no bin specification")
        return tuple(out)

    def utility(self) -> UtilitySpec:
        return UtilitySpec(tuple(Term(*t) for t in self.raw["utility"]["terms"]), self.raw["schema"]["gated"])

    def baseline_utility(self) -> UtilitySpec:
        return self.utility().with_gated_terms(self.raw["utility"]["baseline_gated_columns"])

    def rule_prior(self) -> RuleListPrior:
        return RuleListPrior(**self.raw["rule_prior"])

    def choice_prior(self) -> PriorSpec:
        return PriorSpec(**self.raw["choice_prior"])

    def data_path(self, out_dir: Path) -> Path:
        p = self.raw["data"]["path"]
        return Path(out_dir) / "data.csv" if not p else (self.base_dir / p)

    # -- provenance ----------------------------------------------------------

    def canonical(self, sections=None) -> str:
        keys = sorted(self.raw) if sections is None else sorted(sections)
        return json.dumps({k: self.raw[k] for k in keys}, sort_keys=True, separators=(",", ":"))

    def hash(self, stage: str | None = None, extra: str = "") -> str:
        text = self.canonical(None if stage is None else STAGE_SECTIONS[stage]) + extra
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
