"""Command-line front end: train, cv, predict, validate, simulate, inspect.

Exit codes: 2 invalid input or configuration, 3 sampler failure, 4 I/O.
All randomness flows from --seed (or RISK_ENGINE_SEED) through named
substreams, so a rerun with identical inputs produces bit-identical
numeric outputs.  Commands never mutate their inputs; outputs go only
under the requested output directory, which receives exactly one
manifest.json describing the run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bundle import (
    BundleError,
    load_bundle,
    save_bundle,
    sha256_file,
    write_json,
)
from .data import (
    DataError,
    Schema,
    load_dataset,
    normalize_weights,
)
from .evaluate import (
    EvaluationError,
    SelectionRule,
    cross_validate,
    evaluate_predictions,
    quintile_table,
    recalibrate_intercepts,
    subgroup_table,
)
from .model import (
    JointModel,
    ModelError,
    default_joint_spec,
    load_submodel_config,
)
from .predict import (
    applicable_probability_matrix,
    odds_ratios,
    predict_dataset,
    write_predictions_csv,
)
from .quadrature import QuadratureError
from .sampler import SamplerConfig, SamplerError, sample
from .simulate import (
    SimSetting,
    SimulationError,
    default_predictor_distribution,
    load_preset,
    run_experiment,
)

EXIT_INVALID_INPUT = 2
EXIT_SAMPLER_FAILURE = 3
EXIT_IO = 4

_INPUT_ERRORS = (DataError, ModelError, EvaluationError, SimulationError,
                 QuadratureError, BundleError, json.JSONDecodeError, ValueError)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map exception classes onto the documented exit codes."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SamplerError as err:
            _fail(EXIT_SAMPLER_FAILURE, str(err))
        except _INPUT_ERRORS as err:
            _fail(EXIT_INVALID_INPUT, str(err))
        except OSError as err:
            _fail(EXIT_IO, str(err))

    return wrapper


def _default_seed() -> int:
    return int(os.environ.get("RISK_ENGINE_SEED", "0"))


def _default_threads() -> int:
    return int(os.environ.get("RISK_ENGINE_THREADS", str(os.cpu_count() or 1)))


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_run_manifest(out_dir: Path, command: str, seed: int | None,
                       inputs: dict, outputs: list[str], config: dict) -> None:
    manifest = {
        "kind": "run-manifest",
        "command": command,
        "version": __version__,
        "seed": seed,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config_hash": _sha256_text(json.dumps(config, sort_keys=True)),
        "config": config,
        "inputs": {name: sha256_file(path) for name, path in inputs.items()},
        "outputs": outputs,
    }
    write_json(out_dir / "manifest.json", manifest)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sampler_config(chains, warmup, draws, target_accept, max_depth, seed):
    return SamplerConfig(chains=chains, warmup_iters=warmup, sampling_iters=draws,
                         target_accept=target_accept, max_tree_depth=max_depth,
                         seed=seed)


@click.group()
@click.version_option(version=__version__, prog_name="risk-engine")
def main():
    """Joint Bayesian risk model: training, prediction, and evaluation."""


_sampler_options = [
    click.option("--chains", default=4, show_default=True, type=int),
    click.option("--warmup", default=1000, show_default=True, type=int),
    click.option("--draws", default=1000, show_default=True, type=int),
    click.option("--target-accept", default=0.8, show_default=True, type=float),
    click.option("--max-depth", default=10, show_default=True, type=int),
]


def sampler_options(fn):
    for opt in reversed(_sampler_options):
        fn = opt(fn)
    return fn


@main.command()
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", "schema_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--submodels", "submodels_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Sub-model config: predictor lists per group:outcome + prior.")
@sampler_options
@click.option("--seed", default=_default_seed, type=int,
              help="Master seed (default: RISK_ENGINE_SEED or 0).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guard
def train(data, schema_path, submodels_path, chains, warmup, draws,
          target_accept, max_depth, seed, out_dir):
    """Fit the joint model and write a model bundle."""
    schema = Schema.load(schema_path)
    config, prior = load_submodel_config(submodels_path)
    submodels = default_joint_spec(schema, config)
    dataset = normalize_weights(load_dataset(data, schema))
    cfg = _sampler_config(chains, warmup, draws, target_accept, max_depth, seed)
    model = JointModel(dataset, submodels, prior)
    posterior = sample(model, cfg)
    out = save_bundle(
        Path(out_dir), posterior, submodels, prior, schema,
        include_participant_effect=True, command="train", seed=seed,
        inputs={"data": sha256_file(data), "schema": sha256_file(schema_path),
                "submodels": sha256_file(submodels_path)},
    )
    click.echo(f"bundle written to {out}")
    diag = posterior.diagnostics
    click.echo(f"max R-hat: {diag.get('max_rhat', float('nan')):.4f}  "
               f"divergences: {diag.get('divergences', 0)}")


@main.command()
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", "schema_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--submodels", "submodel_paths", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False),
              help="One or more sub-model configs; each becomes a comparison row.")
@click.option("--k", default=5, show_default=True, type=int)
@click.option("--selection", default="threshold", show_default=True,
              type=click.Choice(["threshold", "credible_interval"]))
@click.option("--cutoff", default=0.10, show_default=True, type=float)
@click.option("--level", default=0.95, show_default=True, type=float)
@sampler_options
@click.option("--seed", default=_default_seed, type=int)
@click.option("--threads", default=_default_threads, type=int,
              help="Worker processes for folds (default: RISK_ENGINE_THREADS "
                   "or available parallelism).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guard
def cv(data, schema_path, submodel_paths, k, selection, cutoff, level, chains,
       warmup, draws, target_accept, max_depth, seed, threads, out_dir):
    """K-fold cross-validated accuracy for one or more model configs."""
    schema = Schema.load(schema_path)
    dataset = normalize_weights(load_dataset(data, schema))
    rule = SelectionRule(method=selection, cutoff=cutoff, level=level)
    cfg = _sampler_config(chains, warmup, draws, target_accept, max_depth, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    reports = {}
    comparison_rows = []
    for path in submodel_paths:
        config, prior = load_submodel_config(path)
        submodels = default_joint_spec(schema, config)
        label = Path(path).stem
        report = cross_validate(dataset, submodels, prior, rule, k=k, seed=seed,
                                sampler_cfg=cfg, threads=threads)
        reports[label] = report
        comparison_rows.append([
            label, prior.slope_prior,
            report["aud"]["auc"], report["cud"]["auc"],
            report["aud"]["e_over_o"], report["cud"]["e_over_o"],
            report["aud"]["brier"], report["cud"]["brier"],
            report["aud"]["fold_average_auc"], report["cud"]["fold_average_auc"],
        ])

    write_json(out / "cv_report.json", reports)
    _write_csv(out / "comparison.csv",
               ["config", "prior", "auc_aud", "auc_cud", "e_over_o_aud",
                "e_over_o_cud", "brier_aud", "brier_cud",
                "fold_avg_auc_aud", "fold_avg_auc_cud"],
               comparison_rows)
    fold_rows = []
    for label, report in reports.items():
        for f in report["folds"]:
            fold_rows.append([label, f["fold"], f["n_test"],
                              f["auc_aud"], f["auc_cud"],
                              f["e_over_o_aud"], f["e_over_o_cud"],
                              f["brier_aud"], f["brier_cud"]])
    _write_csv(out / "folds.csv",
               ["config", "fold", "n_test", "auc_aud", "auc_cud",
                "e_over_o_aud", "e_over_o_cud", "brier_aud", "brier_cud"],
               fold_rows)
    write_run_manifest(
        out, "cv", seed,
        inputs={"data": data, "schema": schema_path,
                **{f"submodels_{Path(p).stem}": p for p in submodel_paths}},
        outputs=["cv_report.json", "comparison.csv", "folds.csv"],
        config={"k": k, "selection": selection, "cutoff": cutoff, "level": level,
                "chains": chains, "warmup": warmup, "draws": draws,
                "threads": threads},
    )
    click.echo(f"cv report written to {out}")


@main.command("predict")
@click.argument("bundle_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("individuals", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", default="univariate", show_default=True,
              type=click.Choice(["univariate", "bivariate"]))
@click.option("--order", default=20, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guard
def predict_cmd(bundle_dir, individuals, mode, order, out_dir):
    """Predict risk for new individuals (outcome columns optional)."""
    bundle = load_bundle(bundle_dir)
    if mode == "bivariate" and not bundle.prior.include_school_effect:
        _fail(EXIT_INVALID_INPUT,
              "bivariate mode requires a bundle trained with the school effect")
    dataset = load_dataset(individuals, bundle.schema, require_outcomes=False)
    predictions = predict_dataset(bundle.draws, bundle.submodels, dataset,
                                  mode=mode, order=order,
                                  probability_offsets=bundle.intercept_offsets)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out / "predictions.csv", predictions)
    write_run_manifest(
        out, "predict", None,
        inputs={"bundle_manifest": Path(bundle_dir) / "manifest.json",
                "individuals": individuals},
        outputs=["predictions.csv"],
        config={"mode": mode, "order": order},
    )
    click.echo(f"predictions written to {out / 'predictions.csv'}")


@main.command()
@click.argument("bundle_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--recalibrate", is_flag=True,
              help="Also fit intercept offsets so E = O per sub-model and "
                   "write the updated bundle.")
@click.option("--mode", default="univariate", show_default=True,
              type=click.Choice(["univariate", "bivariate"]))
@click.option("--order", default=20, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guard
def validate(bundle_dir, data, recalibrate, mode, order, out_dir):
    """Evaluate a trained bundle on an external dataset with outcomes."""
    bundle = load_bundle(bundle_dir)
    dataset = load_dataset(data, bundle.schema)
    if not dataset.has_outcomes:
        _fail(EXIT_INVALID_INPUT, "validation data must include outcome columns")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    base_offsets = dict(bundle.intercept_offsets or {})
    matrix = applicable_probability_matrix(bundle.draws, bundle.submodels, dataset,
                                           mode=mode, order=order,
                                           probability_offsets=base_offsets)
    report = {"pre": evaluate_predictions(dataset, matrix)}
    outputs = ["metrics.json"]
    for outcome in ("aud", "cud"):
        probs, mask = matrix[outcome]
        labels = dataset.outcome_column(outcome)
        try:
            rows = quintile_table(probs[mask], labels[mask])
            _write_csv(out / f"quintiles_{outcome}.csv",
                       ["quintile", "n", "e", "o", "e_over_o"],
                       [[r["quintile"], r["n"], r["e"], r["o"], r["e_over_o"]]
                        for r in rows])
            outputs.append(f"quintiles_{outcome}.csv")
        except EvaluationError:
            pass
        sub_rows = []
        used = []
        for s in bundle.submodels:
            if s.outcome == outcome:
                used.extend(nm for nm in s.predictor_names if nm not in used)
        for nm in used:
            col = dataset.design_columns([nm])[:, 0]
            is_binary = set(np.unique(col[mask])) <= {0.0, 1.0}
            split = "binary" if is_binary else "median"
            for r in subgroup_table(probs[mask], labels[mask], col[mask], split):
                sub_rows.append([nm, r["level"], r["n"], r["e"], r["o"],
                                 r["e_over_o"]])
        if sub_rows:
            _write_csv(out / f"subgroups_{outcome}.csv",
                       ["predictor", "level", "n", "e", "o", "e_over_o"],
                       sub_rows)
            outputs.append(f"subgroups_{outcome}.csv")

    recal_report = None
    if recalibrate:
        recal_report = recalibrate_intercepts(
            bundle.draws, bundle.submodels, dataset, mode=mode, order=order,
            probability_offsets=base_offsets)
        # a previously recalibrated bundle composes additively on the logit scale
        combined = dict(base_offsets)
        for key, delta in recal_report["deltas"].items():
            combined[key] = combined.get(key, 0.0) + delta
        post_matrix = applicable_probability_matrix(
            bundle.draws, bundle.submodels, dataset, mode=mode, order=order,
            probability_offsets=combined)
        report["post_recalibration"] = evaluate_predictions(dataset, post_matrix)
        report["recalibration"] = recal_report
        save_bundle(
            out / "recalibrated", bundle.draws, bundle.submodels, bundle.prior,
            bundle.schema,
            include_participant_effect=bundle.include_participant_effect,
            command="validate --recalibrate", seed=None,
            inputs={"source_bundle": bundle.manifest.get("files", {}),
                    "validation_data": sha256_file(data)},
            provenance={
                "source_bundle_draws": bundle.manifest.get("files", {}).get("draws.csv"),
                "validation_data": sha256_file(data),
                "intercept_deltas": recal_report["deltas"],
            },
            intercept_offsets=combined,
        )
        outputs.append("recalibrated/")

    write_json(out / "metrics.json", report)
    write_run_manifest(
        out, "validate", None,
        inputs={"bundle_manifest": Path(bundle_dir) / "manifest.json", "data": data},
        outputs=outputs,
        config={"recalibrate": recalibrate, "mode": mode, "order": order},
    )
    click.echo(f"validation report written to {out}")
    for outcome in ("aud", "cud"):
        pre = report["pre"][outcome]
        line = (f"{outcome}: AUC {pre['auc']:.4f}  E/O "
                f"{pre['e_over_o']:.4f}  Brier {pre['brier']:.4f}")
        if recal_report is not None:
            post = report["post_recalibration"][outcome]
            line += f"  (post-recalibration E/O {post['e_over_o']:.4f})"
        click.echo(line)


def _apply_overrides(doc: dict, overrides: tuple[str, ...]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise SimulationError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        path = key.split(".")
        node = doc
        for part in path[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise SimulationError(f"unknown override key {key!r}")
            node = node[part]
        leaf = path[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise SimulationError(f"unknown override key {key!r}")
        try:
            node[leaf] = json.loads(value)
        except json.JSONDecodeError:
            node[leaf] = value
    return doc


@main.command("simulate")
@click.option("--preset", type=click.IntRange(1, 4), default=None,
              help="Shipped setting preset (1-4).")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Custom setting JSON (alternative to --preset).")
@click.option("--predictors", "predictors_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Predictor-distribution JSON (default: shipped synthetic).")
@click.option("--replicates", default=None, type=int,
              help="Override the setting's replicate count.")
@click.option("--train-size", default=None, type=int)
@click.option("--test-sizes", default=None,
              help="Comma-separated test-set sizes, e.g. 1000,2000.")
@click.option("--rho-b", default=None, type=float)
@click.option("--override", "overrides", multiple=True,
              help="Dotted-path override into the setting document, e.g. "
                   "intercepts.aud.A=-10.02 (repeatable).")
@click.option("--chains", default=2, show_default=True, type=int)
@click.option("--warmup", default=400, show_default=True, type=int)
@click.option("--draws", default=400, show_default=True, type=int)
@click.option("--seed", default=_default_seed, type=int)
@click.option("--threads", default=_default_threads, type=int,
              help="Worker processes for replicates (default: "
                   "RISK_ENGINE_THREADS or available parallelism).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guard
def simulate_cmd(preset, config_path, predictors_path, replicates, train_size,
                 test_sizes, rho_b, overrides, chains, warmup, draws, seed,
                 threads, out_dir):
    """Run the joint-vs-univariate synthetic-data experiment."""
    if (preset is None) == (config_path is None):
        _fail(EXIT_INVALID_INPUT, "give exactly one of --preset or --config")
    if preset is not None:
        doc = load_preset(preset).to_dict()
    else:
        with open(config_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    doc = _apply_overrides(doc, overrides)
    if train_size is not None:
        doc["train_total"] = train_size
    if test_sizes is not None:
        doc["test_totals"] = [int(v) for v in test_sizes.split(",") if v]
    if rho_b is not None:
        doc["rho_b"] = rho_b
    setting = SimSetting.from_dict(doc)

    if predictors_path is not None:
        from .simulate import PredictorDistribution

        with open(predictors_path, "r", encoding="utf-8") as fh:
            dist = PredictorDistribution.from_dict(json.load(fh))
    else:
        dist = default_predictor_distribution()

    cfg = SamplerConfig(chains=chains, warmup_iters=warmup, sampling_iters=draws,
                        seed=seed)
    report = run_experiment(setting, dist, cfg, replicates=replicates, seed=seed,
                            threads=threads)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: v for k, v in report.items() if k != "per_replicate"}
    write_json(out / "report.json", summary)
    _write_csv(out / "per_replicate.csv",
               ["replicate", "model", "outcome", "test_set", "auc", "brier",
                "e_over_o"],
               [[r["replicate"], r["model"], r["outcome"], r["test_set"],
                 r["auc"], r["brier"], r["e_over_o"]]
                for r in report["per_replicate"]])
    _write_csv(out / "aggregate.csv",
               ["model", "outcome", "test_set", "replicates", "mean_auc",
                "mean_brier", "mean_e_over_o"],
               [[a["model"], a["outcome"], a["test_set"], a["replicates"],
                 a["mean_auc"], a["mean_brier"], a["mean_e_over_o"]]
                for a in report["aggregate"]])
    write_run_manifest(
        out, "simulate", seed,
        inputs=({"config": config_path} if config_path else {}),
        outputs=["report.json", "per_replicate.csv", "aggregate.csv"],
        config={"setting": setting.to_dict(), "chains": chains, "warmup": warmup,
                "draws": draws, "threads": threads,
                "replicates": replicates if replicates is not None
                else setting.replicates},
    )
    click.echo(f"simulation report written to {out}")
    for row in report["aggregate"]:
        click.echo(f"{row['model']:>10} {row['outcome']} test{row['test_set']}: "
                   f"AUC {row['mean_auc']:.4f}  Brier {row['mean_brier']:.4f}  "
                   f"E/O {row['mean_e_over_o']:.4f}")


@main.command()
@click.argument("bundle_dir", type=click.Path(exists=True, file_okay=False))
@_guard
def inspect(bundle_dir):
    """Print a bundle summary: coefficient and OR table, diagnostics."""
    bundle = load_bundle(bundle_dir)
    click.echo(f"bundle: {bundle_dir}")
    click.echo(f"prior: {bundle.prior.slope_prior}  "
               f"school effect: {bundle.prior.include_school_effect}  "
               f"draws: {bundle.draws.n_draws} ({bundle.draws.n_chains} chains)")
    diag = bundle.draws.diagnostics or {}
    if "max_rhat" in diag:
        click.echo(f"max R-hat: {diag['max_rhat']}  "
                   f"divergences: {diag.get('divergences')}")
    click.echo("")
    header = f"{'Sub-model':<10} {'Variable':<28} {'Coef':>8} {'OR':>8} {'95% CI (OR)':>18}"
    click.echo(header)
    click.echo("-" * len(header))
    rows = odds_ratios(bundle.draws, bundle.submodels, bundle.schema)
    by_key = {}
    for row in rows:
        by_key.setdefault(row["submodel"], []).append(row)
    for sub in bundle.submodels:
        intercept = bundle.draws.column(f"intercept[{sub.key}]").mean()
        click.echo(f"{sub.key:<10} {'(intercept)':<28} {intercept:>8.2f}")
        for row in by_key.get(sub.key, []):
            ci = f"({row['or_lo']:.2f}, {row['or_hi']:.2f})"
            click.echo(f"{'':<10} {row['predictor']:<28} "
                       f"{row['coefficient_mean']:>8.2f} {row['or_mean']:>8.2f} {ci:>18}")
    for name in ("sigma_u", "sigma_s"):
        if bundle.draws.has(name):
            col = bundle.draws.column(name)
            click.echo(f"\n{name}: posterior mean {col.mean():.3f}  "
                       f"95% CI ({np.quantile(col, 0.025):.3f}, "
                       f"{np.quantile(col, 0.975):.3f})")


if __name__ == "__main__":
    main()
