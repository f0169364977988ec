"""Synthetic-data experiment comparing joint vs univariate modeling.

Predictors are synthesized from a multivariate normal on the logit scale
(inverse-logit mapped back to [0,1]) plus a joint table for the discrete
ones.  Outcomes come from a latent bivariate normal per participant whose
means are the group/outcome linear predictors; a binary outcome is the
indicator of its latent exceeding zero.  The latent correlation applies in
group B only (the single-outcome groups have nothing to correlate).

The shipped predictor distribution is a synthetic stand-in (documented in
presets/) since the original training data are not public; any reference
dataset can be substituted via ``estimate_predictor_distribution``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.special import expit, logit

from .data import GROUPS, OUTCOMES, Dataset, PredictorSpec, Schema
from .evaluate import (
    SelectionRule,
    _selected_submodels,
    outcome_metrics,
    select_variables,
)
from .model import JointModel, PriorConfig, SubModelSpec, pooled_outcome_model
from .predict import applicable_probability_matrix, pooled_outcome_probabilities
from .rng import substream
from .sampler import SamplerConfig, sample

_LOGIT_CLAMP = 1e-4


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorDistribution:
    """Sampling distribution for the synthetic predictor vectors."""

    continuous_names: tuple[str, ...]
    logit_mean: np.ndarray
    logit_cov: np.ndarray
    discrete_names: tuple[str, ...]
    discrete_combos: tuple[tuple, ...]  # raw value tuples, one per combo
    discrete_probs: np.ndarray
    group_probabilities: dict
    #: categorical levels per discrete predictor; () means plain binary 0/1
    discrete_levels: tuple[tuple, ...] = ()

    def __post_init__(self):
        cov = np.asarray(self.logit_cov, dtype=float)
        if cov.shape != (len(self.continuous_names),) * 2:
            raise SimulationError("covariance shape does not match continuous names")
        if not np.allclose(cov, cov.T):
            raise SimulationError("covariance must be symmetric")
        probs = np.asarray(self.discrete_probs, dtype=float)
        if len(probs) and abs(probs.sum() - 1.0) > 1e-9:
            raise SimulationError("discrete combo probabilities must sum to 1")
        gp = sum(self.group_probabilities.values())
        if abs(gp - 1.0) > 1e-9:
            raise SimulationError("group probabilities must sum to 1")

    @property
    def predictor_names(self) -> list[str]:
        return list(self.continuous_names) + list(self.discrete_names)

    def schema(self) -> Schema:
        specs = [PredictorSpec(name=nm, kind="continuous", scaling_max=1.0)
                 for nm in self.continuous_names]
        levels = self.discrete_levels or tuple(() for _ in self.discrete_names)
        for nm, lv in zip(self.discrete_names, levels):
            if lv:
                specs.append(PredictorSpec(name=nm, kind="categorical", levels=tuple(lv)))
            else:
                specs.append(PredictorSpec(name=nm, kind="binary"))
        return Schema(predictors=tuple(specs))

    def to_dict(self) -> dict:
        levels = self.discrete_levels or tuple(() for _ in self.discrete_names)
        return {
            "group_probabilities": self.group_probabilities,
            "continuous": {
                "names": list(self.continuous_names),
                "logit_mean": np.asarray(self.logit_mean).tolist(),
                "logit_cov": np.asarray(self.logit_cov).tolist(),
            },
            "discrete": {
                "names": list(self.discrete_names),
                "levels": [list(lv) for lv in levels],
                "combos": [list(c) for c in self.discrete_combos],
                "probabilities": np.asarray(self.discrete_probs).tolist(),
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictorDistribution":
        cont = doc["continuous"]
        disc = doc.get("discrete", {"names": [], "combos": [], "probabilities": []})
        return cls(
            continuous_names=tuple(cont["names"]),
            logit_mean=np.asarray(cont["logit_mean"], dtype=float),
            logit_cov=np.asarray(cont["logit_cov"], dtype=float),
            discrete_names=tuple(disc["names"]),
            discrete_combos=tuple(tuple(c) for c in disc["combos"]),
            discrete_probs=np.asarray(disc["probabilities"], dtype=float),
            group_probabilities=dict(doc["group_probabilities"]),
            discrete_levels=tuple(tuple(lv) for lv in disc.get("levels", ())),
        )


def estimate_predictor_distribution(reference: Dataset) -> PredictorDistribution:
    """Fit the synthesis distribution to a reference dataset.

    Continuous predictors are clamped into (0,1), logit-transformed, and
    summarized by their sample mean and covariance (a small ridge is added
    when the sample cannot support a full-rank covariance).  Discrete
    predictors get their empirical joint table; groups their proportions.
    """
    cont_names = [p.name for p in reference.schema.predictors if p.kind == "continuous"]
    disc_names = [p.name for p in reference.schema.predictors if p.kind != "continuous"]

    if cont_names:
        values = np.column_stack([
            np.asarray(reference.raw[nm], dtype=float) for nm in cont_names])
        clamped = np.clip(values, _LOGIT_CLAMP, 1.0 - _LOGIT_CLAMP)
        z = logit(clamped)
        mean = z.mean(axis=0)
        if z.shape[0] <= len(cont_names):
            cov = np.cov(z, rowvar=False) if z.shape[0] > 1 else np.zeros((len(cont_names),) * 2)
            cov = np.atleast_2d(cov) + _LOGIT_CLAMP * np.eye(len(cont_names))
        else:
            cov = np.cov(z, rowvar=False)
            cov = np.atleast_2d(cov)
            if np.linalg.matrix_rank(cov) < len(cont_names):
                cov = cov + _LOGIT_CLAMP * np.eye(len(cont_names))
            # degenerate (constant) predictors still need a positive variance
            diag = np.diag(cov).copy()
            if np.any(diag <= 0):
                cov = cov + _LOGIT_CLAMP * np.eye(len(cont_names))
    else:
        mean = np.empty(0)
        cov = np.empty((0, 0))

    combos: dict[tuple, int] = {}
    for i in range(reference.n):
        key = tuple(reference.raw[nm][i] for nm in disc_names)
        combos[key] = combos.get(key, 0) + 1
    combo_keys = sorted(combos, key=str)
    probs = np.array([combos[k] / reference.n for k in combo_keys]) if combos else np.empty(0)
    levels = tuple(
        tuple(reference.schema.spec(nm).levels) if reference.schema.spec(nm).kind == "categorical" else ()
        for nm in disc_names
    )

    sizes = reference.group_sizes
    return PredictorDistribution(
        continuous_names=tuple(cont_names),
        logit_mean=mean,
        logit_cov=cov,
        discrete_names=tuple(disc_names),
        discrete_combos=tuple(combo_keys),
        discrete_probs=probs,
        group_probabilities={g: sizes[g] / reference.n for g in GROUPS},
        discrete_levels=levels,
    )


@dataclass(frozen=True)
class SimSetting:
    """One simulation design: coefficients, intercepts, sizes, correlation."""

    id: int
    intercepts: dict  # outcome -> group -> float
    coefficients: dict  # outcome -> group -> {predictor: float}
    rho_b: float = 0.8
    latent_variance: float = 5.0
    train_total: int = 3000
    test_totals: tuple[int, ...] = (1000, 2000)
    replicates: int = 500
    group_proportions: dict = field(
        default_factory=lambda: {"A": 0.33, "B": 0.64, "C": 0.03})
    description: str = ""

    def __post_init__(self):
        if not -1.0 < self.rho_b < 1.0:
            raise SimulationError("rho_b must be in (-1, 1)")
        if self.latent_variance <= 0:
            raise SimulationError("latent_variance must be positive")
        for oc in OUTCOMES:
            if oc not in self.intercepts or oc not in self.coefficients:
                raise SimulationError(f"setting must cover outcome {oc!r}")

    def group_counts(self, total: int) -> dict:
        """Largest-remainder apportionment of ``total`` across groups."""
        raw = {g: total * self.group_proportions.get(g, 0.0) for g in GROUPS}
        counts = {g: int(math.floor(v)) for g, v in raw.items()}
        short = total - sum(counts.values())
        for g in sorted(GROUPS, key=lambda g: raw[g] - counts[g], reverse=True)[:short]:
            counts[g] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "rho_b": self.rho_b,
            "latent_variance": self.latent_variance,
            "train_total": self.train_total,
            "test_totals": list(self.test_totals),
            "replicates": self.replicates,
            "group_proportions": self.group_proportions,
            "intercepts": self.intercepts,
            "coefficients": self.coefficients,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SimSetting":
        return cls(
            id=int(doc["id"]),
            intercepts=doc["intercepts"],
            coefficients=doc["coefficients"],
            rho_b=float(doc.get("rho_b", 0.8)),
            latent_variance=float(doc.get("latent_variance", 5.0)),
            train_total=int(doc.get("train_total", 3000)),
            test_totals=tuple(int(v) for v in doc.get("test_totals", (1000, 2000))),
            replicates=int(doc.get("replicates", 500)),
            group_proportions=dict(doc.get("group_proportions",
                                           {"A": 0.33, "B": 0.64, "C": 0.03})),
            description=doc.get("description", ""),
        )


def load_preset(setting_id: int) -> SimSetting:
    name = f"setting{setting_id}.json"
    ref = resources.files("risk_engine").joinpath("presets", name)
    if not ref.is_file():
        raise SimulationError(f"no preset {setting_id} (expected presets/{name})")
    return SimSetting.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def default_predictor_distribution() -> PredictorDistribution:
    ref = resources.files("risk_engine").joinpath("presets", "predictors_default.json")
    return PredictorDistribution.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def _draw_predictors(dist: PredictorDistribution, n: int, rng: np.random.Generator):
    raw = {}
    if dist.continuous_names:
        chol = np.linalg.cholesky(
            dist.logit_cov + 1e-12 * np.eye(len(dist.continuous_names)))
        z = rng.standard_normal((n, len(dist.continuous_names)))
        on_logit = dist.logit_mean + z @ chol.T
        on_unit = expit(on_logit)
        for j, nm in enumerate(dist.continuous_names):
            raw[nm] = on_unit[:, j]
    if dist.discrete_names:
        idx = rng.choice(len(dist.discrete_combos), size=n, p=dist.discrete_probs)
        levels = dist.discrete_levels or tuple(() for _ in dist.discrete_names)
        for j, (nm, lv) in enumerate(zip(dist.discrete_names, levels)):
            values = [c[j] for c in dist.discrete_combos]
            if lv:  # categorical labels
                table = np.array(values, dtype=object)
            else:
                table = np.array([float(v) for v in values])
            raw[nm] = table[idx]
    return raw


def _generate_dataset(dist: PredictorDistribution, setting: SimSetting, total: int,
                      rng: np.random.Generator, tag: str) -> Dataset:
    counts = setting.group_counts(total)
    groups = np.concatenate([np.full(counts[g], g) for g in GROUPS])
    n = len(groups)
    raw = _draw_predictors(dist, n, rng)
    schema = dist.schema()

    # linear predictors on the latent scale, per outcome
    design = {}
    levels = dist.discrete_levels or tuple(() for _ in dist.discrete_names)
    level_map = dict(zip(dist.discrete_names, levels))
    for nm in dist.predictor_names:
        lv = level_map.get(nm, ())
        if lv:
            for label in lv[1:]:
                design[f"{nm}={label}"] = (raw[nm] == label).astype(float)
        else:
            design[nm] = np.asarray(raw[nm], dtype=float)
    means = np.zeros((n, 2))
    for k, oc in enumerate(OUTCOMES):
        for g in GROUPS:
            mask = groups == g
            if not mask.any():
                continue
            eta = np.full(int(mask.sum()), float(setting.intercepts[oc][g]))
            for nm, coef in setting.coefficients[oc].get(g, {}).items():
                if nm not in design:
                    raise SimulationError(f"setting references unknown predictor {nm!r}")
                eta = eta + float(coef) * design[nm][mask]
            means[mask, k] = eta

    sd = math.sqrt(setting.latent_variance)
    z = rng.standard_normal((n, 2))
    latent = np.empty((n, 2))
    is_b = groups == "B"
    rho = setting.rho_b
    latent[:, 0] = means[:, 0] + sd * z[:, 0]
    # group B couples the second latent to the first; A and C stay independent
    coupled = rho * z[:, 0] + math.sqrt(1.0 - rho * rho) * z[:, 1]
    latent[:, 1] = means[:, 1] + sd * np.where(is_b, coupled, z[:, 1])
    y = (latent > 0.0).astype(float)

    ids = tuple(f"{tag}-{i}" for i in range(n))
    return Dataset(
        schema=schema,
        ids=ids,
        groups=groups,
        cluster_ids=tuple("sim" for _ in range(n)),
        weights=np.ones(n),
        y=y,
        raw=raw,
        scaled=True,
        has_outcomes=True,
    )


def generate_replicate(dist: PredictorDistribution, setting: SimSetting,
                       seed: int, replicate: int = 0):
    """Deterministic (train, [test...]) draw for one replicate."""
    train = _generate_dataset(
        dist, setting, setting.train_total,
        substream(seed, "rep", replicate, "train"), f"r{replicate}-train")
    tests = [
        _generate_dataset(dist, setting, total,
                          substream(seed, "rep", replicate, "test", t),
                          f"r{replicate}-test{t}")
        for t, total in enumerate(setting.test_totals)
    ]
    return train, tests


def joint_candidate_submodels(dist: PredictorDistribution) -> list[SubModelSpec]:
    """All predictors as candidates for the at-risk cells, none elsewhere."""
    names = tuple(dist.schema().expanded_names())
    out = []
    for g in GROUPS:
        for oc in OUTCOMES:
            structural = (g, oc) in (("A", "cud"), ("C", "aud"))
            out.append(SubModelSpec(group=g, outcome=oc,
                                    predictor_names=() if structural else names))
    return out


def _fit_select_refit_joint(train, submodels, prior, cfg, rule):
    model = JointModel(train, submodels, prior)
    draws = sample(model, cfg, compute_diagnostics=False)
    selection = select_variables(draws, submodels, rule)
    final = _selected_submodels(submodels, selection)
    if any(len(selection[s.key]) != len(s.predictor_names) for s in submodels):
        draws = sample(JointModel(train, final, prior), cfg, compute_diagnostics=False)
    return draws, final, selection


def _fit_select_refit_pooled(train, outcome, names, prior, cfg, rule):
    model = pooled_outcome_model(train, outcome, names, prior)
    draws = sample(model, cfg, compute_diagnostics=False)
    sub = model.submodels[0]
    selection = select_variables(draws, [sub], rule)
    kept = tuple(selection[sub.key])
    if len(kept) != len(names):
        model = pooled_outcome_model(train, outcome, kept, prior)
        draws = sample(model, cfg, compute_diagnostics=False)
    return draws, model.submodels[0]


def run_replicate(dist: PredictorDistribution, setting: SimSetting,
                  cfg: SamplerConfig, rule: SelectionRule, prior: PriorConfig,
                  seed: int, replicate: int) -> list[dict]:
    """Fit joint + univariate models on one replicate; returns metric rows."""
    train, tests = generate_replicate(dist, setting, seed, replicate)
    rep_cfg = replace(cfg, seed=seed + 104729 * (replicate + 1))
    submodels = joint_candidate_submodels(dist)

    joint_draws, joint_final, _ = _fit_select_refit_joint(
        train, submodels, prior, rep_cfg, rule)
    candidate_names = tuple(dist.schema().expanded_names())
    pooled = {}
    for oc in OUTCOMES:
        pooled[oc] = _fit_select_refit_pooled(
            train, oc, candidate_names, prior, rep_cfg, rule)

    rows = []
    for t, test in enumerate(tests):
        matrix = applicable_probability_matrix(joint_draws, joint_final, test)
        for oc in OUTCOMES:
            probs, mask = matrix[oc]
            labels = test.outcome_column(oc)
            m = outcome_metrics(oc, probs[mask], labels[mask])
            rows.append({"replicate": replicate, "model": "joint", "outcome": oc,
                         "test_set": t, "auc": m.auc, "brier": m.brier,
                         "e_over_o": m.e_over_o})
            u_draws, u_sub = pooled[oc]
            u_probs, u_mask = pooled_outcome_probabilities(u_draws, u_sub, test)
            mu = outcome_metrics(oc, u_probs[u_mask], labels[u_mask])
            rows.append({"replicate": replicate, "model": "univariate", "outcome": oc,
                         "test_set": t, "auc": mu.auc, "brier": mu.brier,
                         "e_over_o": mu.e_over_o})
    return rows


def _replicate_worker(args):
    dist, setting, cfg, rule, prior, seed, replicate = args
    try:
        return run_replicate(dist, setting, cfg, rule, prior, seed, replicate)
    except Exception as err:  # replicate-level failures are recorded, not fatal
        return {"replicate": replicate, "error": f"{type(err).__name__}: {err}"}


def run_experiment(setting: SimSetting, dist: PredictorDistribution | None = None,
                   cfg: SamplerConfig | None = None, replicates: int | None = None,
                   seed: int = 0, rule: SelectionRule | None = None,
                   prior: PriorConfig | None = None, threads: int = 1) -> dict:
    """Full experiment: R replicates of generate/fit/predict, aggregated.

    Joint and univariate fits share the training data, shrinkage prior, and
    selection rule within each replicate.  Replicates draw from disjoint
    RNG substreams, so results do not depend on scheduling.
    """
    dist = dist or default_predictor_distribution()
    cfg = cfg or SamplerConfig(chains=2, warmup_iters=400, sampling_iters=400)
    rule = rule or SelectionRule(method="threshold", cutoff=0.10)
    prior = prior or PriorConfig(slope_prior="student_t", include_school_effect=False)
    r = replicates if replicates is not None else setting.replicates

    tasks = [(dist, setting, cfg, rule, prior, seed, rep) for rep in range(r)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_worker, tasks))
    else:
        results = [_replicate_worker(t) for t in tasks]

    rows: list[dict] = []
    failures: list[dict] = []
    for res in results:
        if isinstance(res, dict):
            failures.append(res)
        else:
            rows.extend(res)

    aggregate = []
    for model in ("joint", "univariate"):
        for oc in OUTCOMES:
            for t in range(len(setting.test_totals)):
                sel = [row for row in rows
                       if row["model"] == model and row["outcome"] == oc
                       and row["test_set"] == t]
                if not sel:
                    continue
                aggregate.append({
                    "model": model,
                    "outcome": oc,
                    "test_set": t,
                    "replicates": len(sel),
                    "mean_auc": float(np.nanmean([s["auc"] for s in sel])),
                    "mean_brier": float(np.nanmean([s["brier"] for s in sel])),
                    "mean_e_over_o": float(np.nanmean([s["e_over_o"] for s in sel])),
                })

    return {
        "setting": setting.to_dict(),
        "replicates_requested": r,
        "replicates_failed": len(failures),
        "failures": failures,
        "per_replicate": rows,
        "aggregate": aggregate,
    }
