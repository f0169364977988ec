"""Variable selection, predictive-accuracy metrics, CV, and recalibration.

Metric pools always exclude structural-zero predictions (first-outcome
rows of group C, second-outcome rows of group A): predicting an impossible
outcome is not of interest and including those near-zero probabilities
would only inflate discrimination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import (
    OUTCOMES,
    Dataset,
    is_structural_zero,
    normalize_weights,
    stratified_folds,
)
from .model import JointModel, PriorConfig, SubModelSpec
from .predict import applicable_probability_matrix, apply_probability_offsets
from .sampler import PosteriorDraws, SamplerConfig, sample


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scalar metrics


def auc(scores, labels) -> float:
    """Area under the ROC curve, Mann-Whitney form with ties counted 1/2.

    Computed from average ranks, which equals the pairwise count
    #(score_pos > score_neg) + 0.5 #(ties) over all positive/negative pairs.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC undefined: needs at least one case and one control")
    from scipy.stats import rankdata

    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def e_over_o(probs, labels) -> float:
    """Ratio of expected to observed cases; undefined when no cases."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    observed = float(labels.sum())
    if observed == 0:
        raise EvaluationError("E/O undefined: no observed cases")
    return float(probs.sum()) / observed


def brier(probs, labels) -> float:
    """Mean squared difference between probabilities and outcomes."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if len(probs) == 0:
        raise EvaluationError("Brier score undefined on empty input")
    return float(np.mean((probs - labels) ** 2))


def quintile_table(probs, labels) -> list[dict]:
    """E, O, and E/O for five equal-count risk groups (sorted by risk).

    When n is not divisible by 5 the lowest-risk groups absorb the extras.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n = len(probs)
    if n < 5:
        raise EvaluationError("quintile table needs at least 5 rows")
    order = np.argsort(probs, kind="stable")
    base, extra = divmod(n, 5)
    sizes = [base + 1 if q < extra else base for q in range(5)]
    rows = []
    start = 0
    for q, size in enumerate(sizes):
        sel = order[start:start + size]
        start += size
        e = float(probs[sel].sum())
        o = float(labels[sel].sum())
        rows.append({
            "quintile": q + 1,
            "n": size,
            "e": e,
            "o": o,
            "e_over_o": e / o if o > 0 else float("nan"),
        })
    return rows


def subgroup_table(probs, labels, covariate, split: str = "median") -> list[dict]:
    """E/O by covariate level: its binary levels, or above/below the median.

    The median is taken over the evaluation sample; ties go to the lower
    group.  Empty levels are flagged rather than dropped.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    covariate = np.asarray(covariate, dtype=float)
    if len(covariate) != len(probs):
        raise EvaluationError("covariate must align with the evaluated rows")
    if split == "binary":
        groups = [("0", covariate == 0), ("1", covariate == 1)]
    elif split == "median":
        med = float(np.median(covariate))
        groups = [(f"<= median ({med:g})", covariate <= med),
                  (f"> median ({med:g})", covariate > med)]
    else:
        raise EvaluationError(f"unknown split {split!r}")
    rows = []
    for label, mask in groups:
        n = int(mask.sum())
        if n == 0:
            rows.append({"level": label, "n": 0, "e": float("nan"), "o": float("nan"),
                         "e_over_o": float("nan"), "flag": "empty"})
            continue
        e = float(probs[mask].sum())
        o = float(labels[mask].sum())
        rows.append({"level": label, "n": n, "e": e, "o": o,
                     "e_over_o": e / o if o > 0 else float("nan")})
    return rows


# ---------------------------------------------------------------------------
# variable selection


@dataclass(frozen=True)
class SelectionRule:
    method: str = "threshold"  # "threshold" | "credible_interval"
    level: float = 0.95
    cutoff: float = 0.10

    def __post_init__(self):
        if self.method not in ("threshold", "credible_interval"):
            raise EvaluationError(f"unknown selection method {self.method!r}")
        if not 0.0 < self.level < 1.0:
            raise EvaluationError("level must be in (0, 1)")
        if self.cutoff < 0:
            raise EvaluationError("cutoff must be >= 0")


def select_variables(draws: PosteriorDraws, submodels, rule: SelectionRule) -> dict:
    """Retained predictor names per sub-model key.

    threshold: keep a predictor iff |posterior mean of beta| >= cutoff
    (coefficients live on the [0,1]-scaled predictor scale, so one cutoff
    is meaningful across predictors).  credible_interval: keep iff the
    central ``level`` interval of beta excludes zero.
    """
    lo_q = (1.0 - rule.level) / 2.0
    out = {}
    for sub in submodels:
        kept = []
        for nm in sub.predictor_names:
            beta = draws.column(f"beta[{sub.key}:{nm}]")
            if rule.method == "threshold":
                if abs(float(beta.mean())) >= rule.cutoff:
                    kept.append(nm)
            else:
                lo, hi = np.quantile(beta, [lo_q, 1.0 - lo_q])
                if lo > 0.0 or hi < 0.0:
                    kept.append(nm)
        out[sub.key] = kept
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class OutcomeMetrics:
    outcome: str
    n_evaluated: int
    n_cases: int
    auc: float
    e: float
    o: float
    e_over_o: float
    brier: float
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "n_evaluated": self.n_evaluated,
            "n_cases": self.n_cases,
            "auc": self.auc,
            "e": self.e,
            "o": self.o,
            "e_over_o": self.e_over_o,
            "brier": self.brier,
            "flags": self.flags,
        }


def outcome_metrics(outcome: str, probs, labels) -> OutcomeMetrics:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    flags = []
    n_cases = int(labels.sum())
    try:
        auc_value = auc(probs, labels)
    except EvaluationError:
        auc_value = float("nan")
        flags.append("auc_undefined_single_class")
    if n_cases > 0:
        eo = float(probs.sum()) / n_cases
    else:
        eo = float("nan")
        flags.append("e_over_o_undefined_no_cases")
    return OutcomeMetrics(
        outcome=outcome,
        n_evaluated=len(probs),
        n_cases=n_cases,
        auc=auc_value,
        e=float(probs.sum()),
        o=float(n_cases),
        e_over_o=eo,
        brier=brier(probs, labels) if len(probs) else float("nan"),
        flags=flags,
    )


def evaluate_predictions(dataset: Dataset, prob_matrix: dict,
                         with_tables: bool = False) -> dict:
    """MetricsReport per outcome from {outcome: (probs, applicable_mask)}."""
    report = {}
    for outcome in OUTCOMES:
        probs, mask = prob_matrix[outcome]
        labels = dataset.outcome_column(outcome)
        m = outcome_metrics(outcome, probs[mask], labels[mask])
        entry = m.to_dict()
        if with_tables:
            try:
                entry["quintiles"] = quintile_table(probs[mask], labels[mask])
            except EvaluationError as err:
                entry["quintiles"] = str(err)
        report[outcome] = entry
    return report


# ---------------------------------------------------------------------------
# cross-validation


def fit_joint(dataset: Dataset, submodels, prior: PriorConfig,
              cfg: SamplerConfig, compute_diagnostics: bool = False) -> PosteriorDraws:
    model = JointModel(dataset, submodels, prior)
    return sample(model, cfg, compute_diagnostics=compute_diagnostics)


def _selected_submodels(submodels, selection: dict) -> list[SubModelSpec]:
    out = []
    for sub in submodels:
        kept = tuple(selection.get(sub.key, sub.predictor_names))
        out.append(SubModelSpec(group=sub.group, outcome=sub.outcome,
                                predictor_names=kept, shrink_scale=sub.shrink_scale))
    return out


def _cv_fold_worker(args):
    """Fit/select/refit/predict one fold; top-level for process pools."""
    (fold_id, dataset, train_idx, test_idx, submodels, prior, rule, cfg,
     mode, order, refit_after_selection) = args
    train = normalize_weights(dataset.subset(train_idx))
    test = dataset.subset(test_idx)
    fold_cfg = SamplerConfig(
        chains=cfg.chains, warmup_iters=cfg.warmup_iters,
        sampling_iters=cfg.sampling_iters, target_accept=cfg.target_accept,
        max_tree_depth=cfg.max_tree_depth, seed=cfg.seed + 7919 * fold_id,
    )
    draws = fit_joint(train, submodels, prior, fold_cfg)
    selection = select_variables(draws, submodels, rule)
    final_submodels = _selected_submodels(submodels, selection)
    if refit_after_selection and any(
            len(selection[s.key]) != len(s.predictor_names) for s in submodels):
        draws = fit_joint(train, final_submodels, prior, fold_cfg)
    matrix = applicable_probability_matrix(draws, final_submodels, test,
                                           mode=mode, order=order)
    fold_entry = {"fold": fold_id, "n_test": test.n}
    outcome_results = {}
    for oc in OUTCOMES:
        probs, mask = matrix[oc]
        labels = test.outcome_column(oc)
        outcome_results[oc] = (probs, mask)
        try:
            fold_entry[f"auc_{oc}"] = auc(probs[mask], labels[mask])
        except EvaluationError:
            fold_entry[f"auc_{oc}"] = float("nan")
            fold_entry.setdefault("flags", []).append(f"{oc}_single_class")
        cases = labels[mask].sum()
        fold_entry[f"e_over_o_{oc}"] = (
            float(probs[mask].sum() / cases) if cases > 0 else float("nan"))
        fold_entry[f"brier_{oc}"] = (
            brier(probs[mask], labels[mask]) if mask.any() else float("nan"))
    return fold_id, fold_entry, selection, outcome_results


def cross_validate(dataset: Dataset, submodels, prior: PriorConfig,
                   rule: SelectionRule | None = None, k: int = 5, seed: int = 0,
                   sampler_cfg: SamplerConfig | None = None,
                   mode: str = "univariate", order: int = 20,
                   refit_after_selection: bool = True, threads: int = 1) -> dict:
    """K-fold CV: fit, select, refit, and pool out-of-fold predictions.

    Pooled metrics over all out-of-fold predictions are primary; per-fold
    AUC and E/O averages are also reported.  Training weights are
    renormalized within each fold to sum to the fold's size.  Folds run in
    worker processes when ``threads`` exceeds one; each fold has its own
    seed, so results do not depend on scheduling.
    """
    rule = rule or SelectionRule()
    cfg = sampler_cfg or SamplerConfig()
    folds = stratified_folds(dataset, k, seed)

    tasks = [
        (fold_id, dataset, train_idx, test_idx, list(submodels), prior, rule,
         cfg, mode, order, refit_after_selection)
        for fold_id, (train_idx, test_idx) in enumerate(folds)
    ]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_cv_fold_worker, tasks))
    else:
        results = [_cv_fold_worker(t) for t in tasks]

    pooled_probs = {oc: np.full(dataset.n, np.nan) for oc in OUTCOMES}
    pooled_mask = {oc: np.zeros(dataset.n, dtype=bool) for oc in OUTCOMES}
    fold_rows = []
    selections = []
    for (fold_id, fold_entry, selection, outcome_results), (_, test_idx) in zip(
            results, folds):
        selections.append(selection)
        fold_rows.append(fold_entry)
        for oc in OUTCOMES:
            probs, mask = outcome_results[oc]
            pooled_probs[oc][test_idx[mask]] = probs[mask]
            pooled_mask[oc][test_idx[mask]] = True

    report = {"k": k, "seed": seed, "folds": fold_rows, "selections": selections}
    for oc in OUTCOMES:
        mask = pooled_mask[oc]
        m = outcome_metrics(oc, pooled_probs[oc][mask], dataset.outcome_column(oc)[mask])
        entry = m.to_dict()
        fold_aucs = [f[f"auc_{oc}"] for f in fold_rows if math.isfinite(f[f"auc_{oc}"])]
        fold_eos = [f[f"e_over_o_{oc}"] for f in fold_rows
                    if math.isfinite(f[f"e_over_o_{oc}"])]
        entry["fold_average_auc"] = float(np.mean(fold_aucs)) if fold_aucs else float("nan")
        entry["fold_average_e_over_o"] = float(np.mean(fold_eos)) if fold_eos else float("nan")
        report[oc] = entry
    return report


# ---------------------------------------------------------------------------
# recalibration


def recalibrate_intercepts(draws: PosteriorDraws, submodels, validation: Dataset,
                           mode: str = "univariate", order: int = 20,
                           probability_offsets: dict | None = None) -> dict:
    """Per-sub-model intercept offsets making E = O on validation data.

    The offset updates the intercept of the deployed risk equation: the
    recalibrated probability is expit(logit(p) + delta) with p the
    posterior-mean predictive probability.  Slopes are untouched and the
    map is strictly monotone, so every within-sub-model pairwise ordering
    (hence the AUC) is preserved exactly.  Sub-models without validation
    cases are skipped with a flag.

    Returns {"deltas": {submodel key: delta}, "skipped": {key: reason}}.
    """
    from scipy.special import expit, logit

    deltas = {}
    flags = {}
    matrix = applicable_probability_matrix(draws, submodels, validation,
                                           mode=mode, order=order,
                                           probability_offsets=probability_offsets)
    for sub in submodels:
        if is_structural_zero(sub.group, sub.outcome):
            continue
        rows = validation.group_rows(sub.group)
        if len(rows) == 0:
            flags[sub.key] = "no_rows"
            continue
        labels = validation.outcome_column(sub.outcome)[rows]
        observed = float(labels.sum())
        if observed == 0:
            flags[sub.key] = "no_cases"
            continue
        scores = logit(np.clip(matrix[sub.outcome][0][rows], 1e-300, 1 - 1e-16))

        def gap(delta):
            return float(np.sum(expit(scores + delta))) - observed

        lo, hi = -40.0, 40.0
        if gap(lo) > 0 or gap(hi) < 0:
            flags[sub.key] = "no_bracket"
            continue
        delta = brentq(gap, lo, hi, xtol=1e-13, rtol=8.9e-16)
        deltas[sub.key] = float(delta)
    return {"deltas": deltas, "skipped": flags}
