"""Marginal risk prediction for new individuals and odds-ratio reporting.

For each posterior draw the random effects are integrated out by quadrature
(participant effect alone by default; the school effect too in bivariate
mode), and the reported probability is the mean over draws.  New-individual
prediction never uses cluster identity: the school effect is either
marginalized or omitted, which keeps the model portable to external
populations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import OUTCOMES, Dataset, Schema, is_structural_zero
from .model import ModelError
from .quadrature import QuadratureRule, gauss_hermite, marginal_probability
from .sampler import PosteriorDraws

PREDICTION_COLUMNS = (
    "id", "group",
    "p_aud", "p_aud_lo", "p_aud_hi", "aud_applicable",
    "p_cud", "p_cud_lo", "p_cud_hi", "cud_applicable",
)

_CHUNK = 64


@dataclass(frozen=True)
class OutcomePrediction:
    probability: float
    lower: float
    upper: float
    applicable: bool


@dataclass(frozen=True)
class RiskPrediction:
    participant_id: str
    group: str
    outcomes: dict  # outcome name -> OutcomePrediction


class _DrawView:
    """Per-draw coefficient matrices extracted once from the draws."""

    def __init__(self, draws: PosteriorDraws, submodels):
        self.intercepts = {}
        self.slopes = {}
        self.predictors = {}
        for sub in submodels:
            self.intercepts[sub.key] = draws.column(f"intercept[{sub.key}]")
            names = [f"beta[{sub.key}:{nm}]" for nm in sub.predictor_names]
            self.slopes[sub.key] = draws.columns(names) if names else None
            self.predictors[sub.key] = sub.predictor_names
        self.n_draws = draws.n_draws
        self.sigma_u = draws.column("sigma_u") if draws.has("sigma_u") else np.zeros(self.n_draws)
        self.sigma_s = draws.column("sigma_s") if draws.has("sigma_s") else None


def _eta_matrix(view: _DrawView, key: str, x: np.ndarray) -> np.ndarray:
    """Linear predictors, shape (rows, draws), without random effects."""
    eta = np.broadcast_to(view.intercepts[key], (x.shape[0], view.n_draws)).copy()
    slopes = view.slopes[key]
    if slopes is not None:
        eta += x @ slopes.T
    return eta


def apply_probability_offsets(probabilities: np.ndarray, offset: float) -> np.ndarray:
    """Recalibration layer: shift the risk equation's intercept by ``offset``."""
    from scipy.special import expit, logit

    clipped = np.clip(probabilities, 1e-300, 1 - 1e-16)
    return expit(logit(clipped) + offset)


def _apply_offset(values: np.ndarray, offset: float) -> np.ndarray:
    if offset == 0.0:
        return values
    return apply_probability_offsets(values, offset)


def predict_dataset(draws: PosteriorDraws, submodels, dataset: Dataset,
                    mode: str = "univariate", order: int = 20,
                    probability_offsets: dict | None = None) -> list[RiskPrediction]:
    """Posterior predictive probabilities for every row of ``dataset``.

    Structural-zero outcomes are still computed (from their intercept-only
    sub-models) but flagged not applicable.  ``probability_offsets`` maps
    sub-model keys to recalibration offsets applied on the logit of the
    probability (a strictly monotone layer, so ranks are preserved).
    """
    rule = gauss_hermite(order, mode)
    view = _DrawView(draws, submodels)
    offsets = probability_offsets or {}
    if mode == "bivariate" and view.sigma_s is None:
        raise ModelError("bivariate mode requires a model trained with the school effect")

    probs = {k: np.empty(dataset.n) for k in OUTCOMES}
    los = {k: np.empty(dataset.n) for k in OUTCOMES}
    his = {k: np.empty(dataset.n) for k in OUTCOMES}

    for group in ("A", "B", "C"):
        rows = dataset.group_rows(group)
        if len(rows) == 0:
            continue
        for outcome in OUTCOMES:
            key = f"{group}:{outcome}"
            names = view.predictors[key]
            x = dataset.design_columns(names)[rows] if names else np.empty((len(rows), 0))
            offset = float(offsets.get(key, 0.0))
            for start in range(0, len(rows), _CHUNK):
                sel = slice(start, start + _CHUNK)
                eta = _eta_matrix(view, key, x[sel])
                if mode == "bivariate":
                    p = marginal_probability(eta, view.sigma_u, view.sigma_s, rule)
                else:
                    p = marginal_probability(eta, view.sigma_u, None, rule)
                probs[outcome][rows[sel]] = _apply_offset(p.mean(axis=1), offset)
                q = np.quantile(p, [0.025, 0.975], axis=1)
                los[outcome][rows[sel]] = _apply_offset(q[0], offset)
                his[outcome][rows[sel]] = _apply_offset(q[1], offset)

    out = []
    for i in range(dataset.n):
        group = str(dataset.groups[i])
        entry = {}
        for outcome in OUTCOMES:
            entry[outcome] = OutcomePrediction(
                probability=float(probs[outcome][i]),
                lower=float(los[outcome][i]),
                upper=float(his[outcome][i]),
                applicable=not is_structural_zero(group, outcome),
            )
        out.append(RiskPrediction(participant_id=dataset.ids[i], group=group, outcomes=entry))
    return out


def applicable_probability_matrix(draws: PosteriorDraws, submodels, dataset: Dataset,
                                  mode: str = "univariate", order: int = 20,
                                  probability_offsets: dict | None = None) -> dict:
    """Posterior-mean probabilities per outcome, with applicability masks.

    Returns {outcome: (probabilities, applicable_mask)}; used by evaluation,
    which excludes structural-zero rows from every metric pool.
    ``probability_offsets`` maps sub-model keys to recalibration offsets
    on the logit-probability scale.
    """
    rule = gauss_hermite(order, mode)
    view = _DrawView(draws, submodels)
    offsets = probability_offsets or {}
    result = {}
    keys = {s.key for s in submodels}
    for outcome in OUTCOMES:
        p_mean = np.full(dataset.n, np.nan)
        mask = np.zeros(dataset.n, dtype=bool)
        for group in ("A", "B", "C"):
            key = f"{group}:{outcome}"
            if key not in keys:
                continue
            rows = dataset.group_rows(group)
            if len(rows) == 0:
                continue
            names = view.predictors[key]
            x = dataset.design_columns(names)[rows] if names else np.empty((len(rows), 0))
            offset = float(offsets.get(key, 0.0))
            for start in range(0, len(rows), _CHUNK):
                sel = slice(start, start + _CHUNK)
                eta = _eta_matrix(view, key, x[sel])
                if mode == "bivariate":
                    p = marginal_probability(eta, view.sigma_u, view.sigma_s, rule)
                else:
                    p = marginal_probability(eta, view.sigma_u, None, rule)
                p_mean[rows[sel]] = _apply_offset(p.mean(axis=1), offset)
            mask[rows] = not is_structural_zero(group, outcome)
        result[outcome] = (p_mean, mask)
    return result


def pooled_outcome_probabilities(draws: PosteriorDraws, submodel, dataset: Dataset,
                                 order: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean probabilities of a pooled single-outcome model.

    Applies to every participant in the groups that use the outcome's
    substance (A and B for the first outcome, B and C for the second).
    Returns (probabilities, mask) aligned with the dataset rows; the school
    effect is marginalized when the model carries one.
    """
    rule = gauss_hermite(order, "univariate")
    outcome = submodel.outcome
    user_groups = ("A", "B") if outcome == "aud" else ("B", "C")
    rows = np.flatnonzero(np.isin(dataset.groups, user_groups))
    names = submodel.predictor_names
    x = dataset.design_columns(names)[rows] if names else np.empty((len(rows), 0))
    intercept = draws.column(f"intercept[{submodel.key}]")
    slope_names = [f"beta[{submodel.key}:{nm}]" for nm in names]
    slopes = draws.columns(slope_names) if slope_names else None
    sigma = draws.column("sigma_s") if draws.has("sigma_s") else np.zeros(draws.n_draws)

    p_mean = np.full(dataset.n, np.nan)
    for start in range(0, len(rows), _CHUNK):
        sel = slice(start, start + _CHUNK)
        eta = np.broadcast_to(intercept, (x[sel].shape[0], draws.n_draws)).copy()
        if slopes is not None:
            eta += x[sel] @ slopes.T
        p = marginal_probability(eta, sigma, None, rule)
        p_mean[rows[sel]] = p.mean(axis=1)
    mask = np.zeros(dataset.n, dtype=bool)
    mask[rows] = True
    return p_mean, mask


def odds_ratios(draws: PosteriorDraws, submodels, schema: Schema) -> list[dict]:
    """Per-coefficient posterior summaries with ORs on original scales.

    The OR for a coefficient beta with scaling maximum M is exp(beta / M),
    transformed per draw and then summarized (posterior mean and central
    95% interval of the OR draws).
    """
    rows = []
    for sub in submodels:
        for nm in sub.predictor_names:
            beta = draws.column(f"beta[{sub.key}:{nm}]")
            m = schema.scaling_max_of(nm)
            or_draws = np.exp(beta / m)
            rows.append({
                "submodel": sub.key,
                "predictor": nm,
                "coefficient_mean": float(beta.mean()),
                "or_mean": float(or_draws.mean()),
                "or_lo": float(np.quantile(or_draws, 0.025)),
                "or_hi": float(np.quantile(or_draws, 0.975)),
                "scaling_max": m,
            })
    return rows


def write_predictions_csv(path, predictions: list[RiskPrediction]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for pred in predictions:
            aud = pred.outcomes["aud"]
            cud = pred.outcomes["cud"]
            writer.writerow([
                pred.participant_id, pred.group,
                repr(aud.probability), repr(aud.lower), repr(aud.upper),
                str(int(aud.applicable)),
                repr(cud.probability), repr(cud.lower), repr(cud.upper),
                str(int(cud.applicable)),
            ])
