"""Command-line pipeline: synth, mine, sample, fit, compose, predict, forecast, compare.

Every command reads the same configuration and writes into ``--out``.
Each artifact records the provenance hash of the configuration sections
(and input data) it depends on; a downstream command refuses an artifact
whose hash does not match the current configuration.

Exit codes: 0 success, 2 invalid input or stale artifact, 3 estimation
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .choice import EstimationError, build_design, estimate_evidence, map_estimate
from .config import ConfigError, RunConfig, file_digest
from .data import DataError, SchemaError, build_requirements, discretize, load_dataset, write_dataset
from .forecast import SweepSpec, sweep, write_curve
from .mining import MiningError, mine_conjunctions, read_candidates, write_candidates
from .model_tree import (
    CompositionError,
    ModelTree,
    TreePosterior,
    evidence_of_tree_model,
    fit_tree,
    posterior_model_prob,
    predict,
    read_posterior,
    reweight_trees,
    select_tree_indices,
    write_posterior,
)
from .rulelist import RuleList, read_tree_sample, sample_rule_lists, write_tree_sample
from .synth import bicycle_dgp, generate, write_truth

log = logging.getLogger("choicetree")

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_IO = 0, 2, 3, 4


class StaleArtifactError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Provenance helpers


class Run:
    def __init__(self, cfg: RunConfig, out: Path, workers: int):
        self.cfg = cfg
        self.out = Path(out)
        self.workers = max(1, workers)

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def data_path(self) -> Path:
        return self.cfg.data_path(self.out)

    def stage_hash(self, stage: str) -> str:
        extra = "" if stage == "synth" else file_digest(self.data_path)
        return self.cfg.hash(stage, extra)

    def meta(self, stage: str) -> dict:
        return {"config_hash": self.stage_hash(stage), "seed": self.cfg.seed, "version": __version__, "stage": stage}

    def header(self, stage: str) -> list[str]:
        m = self.meta(stage)
        return [f"{k}={m[k]}" for k in ("stage", "config_hash", "seed", "version")]

    def check(self, found: str | None, stage: str, path: Path) -> None:
        want = self.stage_hash(stage)
        if found != want:
            raise StaleArtifactError(
                f"{path} was produced under configuration hash {found}, but the current configuration "
                f"gives {want} for stage {stage!r}; rerun the upstream command"
            )

    def dataset(self):
        return load_dataset(self.data_path, self.cfg.schema())

    def requirements(self):
        return build_requirements(self.cfg.bins())


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _load_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(run: Run, args) -> None:
    s = run.cfg.section("synth")
    if s["preset"] != "bicycle":
        raise ConfigError(f"unknown synth preset {s['preset']!r}")
    spec = bicycle_dgp(int(s["n"]), run.cfg.seed)
    ds, truth = generate(spec)
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.data_path
    write_dataset(ds, path, run.header("synth"))
    write_truth(truth, spec, ds.obs_ids, run.path("truth.json"))
    log.info("wrote %d observations to %s", ds.n_obs, path)


def cmd_mine(run: Run, args) -> None:
    m = run.cfg.section("mining")
    ds = run.dataset()
    bm = discretize(ds, run.cfg.bins())
    cs = mine_conjunctions(bm, m["max_card"], m["min_support_pos"], m["min_support_neg"])
    if len(cs) == 0:
        raise MiningError("no conjunction meets the support thresholds; lower them")
    write_candidates(cs, run.path("candidates.tsv"), run.header("mine"))
    log.info("mined %d candidate antecedents %s", len(cs), cs.cardinality_counts())


def _candidates(run: Run):
    path = run.path("candidates.tsv")
    cs, meta = read_candidates(path, run.requirements())
    run.check(meta.get("config_hash"), "mine", path)
    return cs


def cmd_sample(run: Run, args) -> None:
    s = run.cfg.section("sampler")
    cs = _candidates(run)
    bm = discretize(run.dataset(), run.cfg.bins())
    n_iter = int(s["n_iter"])
    burn = int(round(s["burn_in_fraction"] * n_iter))
    ts = sample_rule_lists(bm, cs, run.cfg.rule_prior(), n_iter=n_iter, burn_in=burn, thin=int(s["thin"]),
                           seed=run.cfg.seed, n_chains=int(s["chains"]), d_max=int(s["d_max"]))
    write_tree_sample(ts, run.path("trees.json"), run.requirements(), run.meta("sample"))
    log.info("sampler: acceptance %.3f, %d distinct lists, mode %s", ts.acceptance_rate, len(ts),
             ts.mode().describe(run.requirements()))


def _tree_sample(run: Run):
    path = run.path("trees.json")
    ts, meta = read_tree_sample(path, run.requirements())
    run.check(meta.get("config_hash"), "sample", path)
    return ts


def _fit_one(job):
    cfg_raw, base_dir, data_path, labels, kw = job
    cfg = RunConfig(cfg_raw, base_dir)
    ds = load_dataset(data_path, cfg.schema())
    rl = RuleList.from_labels(labels, build_requirements(cfg.bins()))
    return fit_tree(ds, cfg.utility(), cfg.bins(), rl, cfg.choice_prior(), **kw).to_dict(build_requirements(cfg.bins()))


def cmd_fit(run: Run, args) -> None:
    ev = run.cfg.section("evidence")
    sel = run.cfg.section("selection")
    ts = _tree_sample(run)
    reqs = run.requirements()
    idx = select_tree_indices(ts, int(sel["k"]), (sel["quota_posterior"], sel["quota_likelihood"]))
    seeds = np.random.SeedSequence(run.cfg.seed).generate_state(len(idx) + 1)
    jobs = []
    for i, s in zip(idx, seeds):
        kw = dict(policy=ev["consider_policy"], n_draws=int(ev["n_draws"]), df=float(ev["df"]), seed=int(s),
                  starts=int(ev["starts"]), count=int(ts.counts[i]), log_prior=float(ts.log_priors[i]),
                  log_label_lik=float(ts.log_liks[i]))
        jobs.append((run.cfg.raw, run.cfg.base_dir, run.data_path, ts.lists[i].labels(reqs), kw))
    if run.workers > 1:
        with ProcessPoolExecutor(run.workers) as pool:
            fitted = list(pool.map(_fit_one, jobs))
    else:
        fitted = [_fit_one(j) for j in jobs]
    fits_dir = run.path("fits")
    fits_dir.mkdir(parents=True, exist_ok=True)
    for old in fits_dir.glob("tree_*.json"):
        old.unlink()
    for n, tree in enumerate(fitted):
        _dump_json({"meta": run.meta("fit"), "tree": tree}, fits_dir / f"tree_{n:02d}.json")
        e = tree["evidence"]
        log.info("tree %d: log evidence %s (MC se %s, ESS %s)", n, e["log_evidence"], e["mc_standard_error"], e["ess"])

    ds = run.dataset()
    design = build_design(ds, run.cfg.baseline_utility())
    me = map_estimate(design, run.cfg.choice_prior(), starts=int(ev["starts"]), seed=int(seeds[-1]))
    base = estimate_evidence(design, run.cfg.choice_prior(), n_draws=int(ev["n_draws"]), df=float(ev["df"]),
                             seed=int(seeds[-1]), map_est=me)
    _dump_json({"meta": run.meta("fit"), "tree": ModelTree(None, (), base).to_dict(reqs)}, fits_dir / "baseline.json")
    log.info("plain MNL: log evidence %.4f (MC se %.4f)", base.log_evidence, base.mc_standard_error)


def _fits(run: Run) -> tuple[list[ModelTree], ModelTree]:
    reqs = run.requirements()
    fits_dir = run.path("fits")
    paths = sorted(fits_dir.glob("tree_*.json"))
    if not paths:
        raise FileNotFoundError(f"no fitted trees in {fits_dir}; run 'fit' first")
    trees = []
    for p in paths + [fits_dir / "baseline.json"]:
        doc = _load_json(p)
        run.check(doc["meta"].get("config_hash"), "fit", p)
        trees.append(ModelTree.from_dict(doc["tree"], reqs))
    return trees[:-1], trees[-1]


def _baseline_posterior(run: Run, base: ModelTree) -> TreePosterior:
    return TreePosterior((base,), np.ones(1), run.cfg.baseline_utility(), (), {"model": "mnl"})


def cmd_compose(run: Run, args) -> None:
    trees, _ = _fits(run)
    tp = reweight_trees(trees, run.cfg.utility(), run.cfg.bins(),
                        {**run.meta("fit"), "consider_policy": run.cfg.section("evidence")["consider_policy"],
                         "truncated_to_selected": len(trees)})
    write_posterior(tp, run.path("posterior.json"))
    for t, w in zip(tp.trees, tp.weights):
        log.info("weight %.4f  %s", w, t.rule_list.describe(run.requirements()))


def _posterior(run: Run) -> TreePosterior:
    path = run.path("posterior.json")
    tp = read_posterior(path)
    run.check(tp.meta.get("config_hash"), "fit", path)
    return tp


def cmd_predict(run: Run, args) -> None:
    tp = _posterior(run)
    src = Path(args.input) if args.input else run.data_path
    ds = load_dataset(src, run.cfg.schema())
    P = predict(tp, ds)
    out = run.path("predictions.csv")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for h in run.header("fit") + [f"input={src.name}"]:
            fh.write(f"# {h}\n")
        fh.write(",".join(["obs_id", *ds.schema.alt_names]) + "\n")
        for oid, row in zip(ds.obs_ids, P):
            fh.write(",".join([str(int(oid)), *(repr(float(p)) for p in row)]) + "\n")
    log.info("wrote predictions for %d observations to %s", ds.n_obs, out)


def cmd_forecast(run: Run, args) -> None:
    s = run.cfg.section("sweep")
    clamp = None if s["clamp"] == "none" else float(s["clamp"])
    spec = SweepSpec.arange(s["variable"], s["start"], s["stop"], s["step"], clamp)
    tp = _posterior(run)
    _, base = _fits(run)
    ds = run.dataset()
    for name, model in (("tree", tp), ("mnl", _baseline_posterior(run, base))):
        curve = sweep(model, ds, spec, max_draws=int(s["max_draws"]), seed=run.cfg.seed)
        write_curve(curve, run.path(f"forecast_{name}.csv"), run.header("forecast") + [f"model={name}"])
        g = ds.schema.gated
        log.info("%s: %s share %.4f -> %.4f", name, g, curve.share(g)[0], curve.share(g)[-1])


def cmd_compare(run: Run, args) -> None:
    trees, base = _fits(run)
    prior_tree = float(run.cfg.section("compare")["prior_tree"])
    how = run.cfg.section("evidence")["prior_weights"]
    lz_tree = evidence_of_tree_model(trees, how)
    lz_mnl = base.log_evidence
    p = posterior_model_prob(lz_tree, lz_mnl, prior_tree)
    report = {
        "meta": run.meta("compare"),
        "log_evidence_model_tree": lz_tree,
        "log_evidence_mnl": lz_mnl,
        "tree_prior_weights": how,
        "n_trees": len(trees),
        "prior_model_tree": prior_tree,
        "posterior_model_tree": p,
        "posterior_mnl": 1.0 - p,
        "per_tree": [
            {"log_evidence": t.log_evidence, "mc_standard_error": t.evidence.mc_standard_error,
             "ess": t.evidence.ess, "count": t.count}
            for t in trees
        ],
    }
    _dump_json(report, run.path("compare.json"))
    log.info("posterior probability of the model tree: %.6f (MNL %.6f)", p, 1 - p)


COMMANDS = {
    "synth": cmd_synth,
    "mine": cmd_mine,
    "sample": cmd_sample,
    "fit": cmd_fit,
    "compose": cmd_compose,
    "predict": cmd_predict,
    "forecast": cmd_forecast,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="choicetree", description="Bayesian model trees for discrete choice.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="TOML configuration file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--workers", type=int, default=1, help="processes for per-tree fits")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--input", help="dataset to predict (predict only; defaults to the configured data)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, {"seed": args.seed} if args.seed is not None else None)
        run = Run(cfg, Path(args.out), args.workers)
        if args.command != "synth" and not run.data_path.exists():
            raise FileNotFoundError(f"dataset {run.data_path} not found (run 'synth' or set data.path)")
        COMMANDS[args.command](run, args)
    except StaleArtifactError as e:
        print(f"error: stale artifact: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EstimationError, CompositionError) as e:
        print(f"error: estimation failed: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ConfigError, DataError, SchemaError, MiningError, ValueError, KeyError) as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: I/O: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
