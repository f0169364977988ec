"""Joint two-outcome logistic model: sub-models, priors, log posterior.

The joint model has one logistic sub-model per (group, outcome) cell, all
sharing a participant-level random intercept and optionally a school-level
one.  Slopes get shrinkage priors (double-exponential or 1-df Student-t)
with per-coefficient Half-Cauchy scales; the structural-zero cells use a
wider Half-Cauchy scale (5) that concentrates their slopes near zero.

Unconstrained parameterization: positive parameters are stored as logs and
random effects in non-centered form (u = sigma * z).  The gradient of the
log posterior is analytic; the non-differentiability of the lasso prior at
zero uses the subgradient-0 convention.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import (
    GROUPS,
    OUTCOMES,
    DataError,
    Dataset,
    Participant,
    Schema,
    is_structural_zero,
)

LOG_2PI = math.log(2.0 * math.pi)

#: Half-Cauchy scale for shrinkage parameters of structural-zero cells.
CONCENTRATED_SHRINK_SCALE = 5.0
DEFAULT_SHRINK_SCALE = 1.0


class ModelError(ValueError):
    pass


def default_shrink_scale(group: str, outcome: str) -> float:
    return CONCENTRATED_SHRINK_SCALE if is_structural_zero(group, outcome) else DEFAULT_SHRINK_SCALE


@dataclass(frozen=True)
class SubModelSpec:
    """Predictor set and shrinkage scale for one (group, outcome) cell."""

    group: str
    outcome: str
    predictor_names: tuple[str, ...] = ()
    shrink_scale: float | None = None

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ModelError(f"unknown group {self.group!r}")
        if self.outcome not in OUTCOMES:
            raise ModelError(f"unknown outcome {self.outcome!r}")
        if self.shrink_scale is None:
            object.__setattr__(self, "shrink_scale", default_shrink_scale(self.group, self.outcome))
        if is_structural_zero(self.group, self.outcome):
            if self.shrink_scale != CONCENTRATED_SHRINK_SCALE:
                raise ModelError(
                    f"sub-model {self.key}: structural-zero cells must use "
                    f"shrink_scale {CONCENTRATED_SHRINK_SCALE}"
                )
            if self.predictor_names:
                warnings.warn(
                    f"sub-model {self.key} is a structural zero; its slopes are "
                    "concentrated near zero by the prior",
                    stacklevel=2,
                )
        elif self.shrink_scale <= 0:
            raise ModelError(f"sub-model {self.key}: shrink_scale must be positive")

    @property
    def key(self) -> str:
        return f"{self.group}:{self.outcome}"


@dataclass(frozen=True)
class PriorConfig:
    """Prior family and hyperprior scales."""

    slope_prior: str = "student_t"  # "lasso" (double-exponential) or "student_t" (1 df)
    intercept_variance: float = 100.0
    sigma_u_scale: float = 4.0
    sigma_s_scale: float = 10.0
    include_school_effect: bool = True

    def __post_init__(self):
        if self.slope_prior not in ("lasso", "student_t"):
            raise ModelError(f"unknown slope prior {self.slope_prior!r}")
        if min(self.intercept_variance, self.sigma_u_scale, self.sigma_s_scale) <= 0:
            raise ModelError("prior scales must be positive")

    def to_dict(self) -> dict:
        return {
            "slope_prior": self.slope_prior,
            "intercept_variance": self.intercept_variance,
            "sigma_u_scale": self.sigma_u_scale,
            "sigma_s_scale": self.sigma_s_scale,
            "include_school_effect": self.include_school_effect,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def default_joint_spec(schema: Schema, config: dict) -> list[SubModelSpec]:
    """Build the six sub-models from a {(group:outcome) -> predictor list} config."""
    known = set(schema.expanded_names())
    by_key = {}
    for key, names in config.items():
        group, _, outcome = key.partition(":")
        if group not in GROUPS or outcome not in OUTCOMES:
            raise ModelError(f"bad sub-model key {key!r} (want e.g. 'B:aud')")
        for nm in names:
            if nm not in known:
                raise ModelError(f"sub-model {key}: unknown predictor {nm!r}")
        by_key[(group, outcome)] = tuple(names)
    specs = []
    for group in GROUPS:
        for outcome in OUTCOMES:
            specs.append(
                SubModelSpec(group=group, outcome=outcome,
                             predictor_names=by_key.get((group, outcome), ()))
            )
    return specs


def load_submodel_config(path) -> tuple[dict, PriorConfig]:
    """Read the sub-model configuration file: predictor lists + prior choice."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    submodels = doc.get("submodels", {})
    prior = PriorConfig.from_dict(doc.get("prior", {}))
    return submodels, prior


def save_submodel_config(path, submodels: dict, prior: PriorConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"submodels": submodels, "prior": prior.to_dict()}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class LogDensityResult:
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class _Block:
    """One likelihood block: a sub-model applied to a fixed participant set."""

    key: str
    outcome_index: int
    rows: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    predictor_names: tuple[str, ...]
    shrink_scale: float

    @property
    def n_slopes(self) -> int:
        return len(self.predictor_names)


class ParameterLayout:
    """Index bookkeeping for the packed (unconstrained) parameter vector."""

    def __init__(self, blocks, n, cluster_labels, participant_ids,
                 has_participant_effect, has_school_effect):
        self.block_keys = [b.key for b in blocks]
        nb = len(blocks)
        total_slopes = sum(b.n_slopes for b in blocks)
        self.intercepts = slice(0, nb)
        self.slopes = slice(nb, nb + total_slopes)
        self.log_lambdas = slice(nb + total_slopes, nb + 2 * total_slopes)
        offset = nb + 2 * total_slopes
        self.slope_slices = []
        pos = 0
        for b in blocks:
            self.slope_slices.append(slice(nb + pos, nb + pos + b.n_slopes))
            pos += b.n_slopes
        self.has_participant_effect = has_participant_effect
        self.has_school_effect = has_school_effect
        self.log_sigma_u = None
        self.log_sigma_s = None
        if has_participant_effect:
            self.log_sigma_u = offset
            offset += 1
        if has_school_effect:
            self.log_sigma_s = offset
            offset += 1
        self.z_u = slice(offset, offset + (n if has_participant_effect else 0))
        offset = self.z_u.stop
        n_clusters = len(cluster_labels) if has_school_effect else 0
        self.z_s = slice(offset, offset + n_clusters)
        self.dim = self.z_s.stop

        names = [f"intercept[{b.key}]" for b in blocks]
        for b in blocks:
            names.extend(f"beta[{b.key}:{nm}]" for nm in b.predictor_names)
        for b in blocks:
            names.extend(f"lambda[{b.key}:{nm}]" for nm in b.predictor_names)
        if has_participant_effect:
            names.append("sigma_u")
        if has_school_effect:
            names.append("sigma_s")
        if has_participant_effect:
            names.extend(f"u[{pid}]" for pid in participant_ids)
        if has_school_effect:
            names.extend(f"u_school[{c}]" for c in cluster_labels)
        self.names = tuple(names)
        #: columns that are strictly positive on the constrained scale
        self.positive = np.zeros(self.dim, dtype=bool)
        self.positive[self.log_lambdas] = True
        if self.log_sigma_u is not None:
            self.positive[self.log_sigma_u] = True
        if self.log_sigma_s is not None:
            self.positive[self.log_sigma_s] = True


#: log-scale parameters are exponentiated with this cap so that the density
#: and its gradient stay finite for every finite unconstrained vector
_EXP_CAP = 400.0


def _exp_capped(t):
    return np.exp(np.minimum(t, _EXP_CAP))


def _halfcauchy_logpdf_and_grad_logscale(t: float, scale: float) -> tuple[float, float]:
    """Half-Cauchy density of x = e^t including the log-scale Jacobian.

    Evaluated in the log domain (log1p(x^2/s^2) as logaddexp) so the result
    is finite for every finite t.
    """
    r = 2.0 * (t - math.log(scale))
    value = math.log(2.0 / (math.pi * scale)) - np.logaddexp(0.0, r) + t
    grad = 1.0 - 2.0 * expit(r)
    return float(value), float(grad)


class JointModel:
    """Log-posterior machine for a dataset, sub-model list, and prior config.

    ``include_participant_effect=False`` yields the plain (pooled) logistic
    model used by the univariate baselines; everything else is shared.
    """

    def __init__(self, dataset: Dataset, submodels, prior: PriorConfig,
                 include_participant_effect: bool = True):
        self.dataset = dataset
        self.prior = prior
        self.submodels = list(submodels)
        self.include_participant_effect = include_participant_effect
        keys = [s.key for s in self.submodels]
        if len(set(keys)) != len(keys):
            raise ModelError("duplicate sub-model keys")
        known = set(dataset.x_names)
        blocks = []
        for sub in self.submodels:
            for nm in sub.predictor_names:
                if nm not in known:
                    raise ModelError(f"sub-model {sub.key}: predictor {nm!r} missing from data")
            rows = dataset.group_rows(sub.group)
            x = dataset.design_columns(sub.predictor_names)[rows]
            blocks.append(
                _Block(
                    key=sub.key,
                    outcome_index=OUTCOMES.index(sub.outcome),
                    rows=rows,
                    x=np.ascontiguousarray(x),
                    y=dataset.y[rows, OUTCOMES.index(sub.outcome)].copy(),
                    w=dataset.weights[rows].copy(),
                    predictor_names=sub.predictor_names,
                    shrink_scale=sub.shrink_scale,
                )
            )
        self.blocks = blocks
        self.layout = ParameterLayout(
            blocks,
            dataset.n,
            dataset.cluster_labels,
            dataset.ids,
            include_participant_effect,
            prior.include_school_effect,
        )
        # per-slope Half-Cauchy scales, aligned with the concatenated slopes
        self._shrink_scales = np.concatenate(
            [np.full(b.n_slopes, b.shrink_scale) for b in blocks]
        ) if self.layout.slopes.stop > self.layout.slopes.start else np.empty(0)

    @property
    def dim(self) -> int:
        return self.layout.dim

    # -- likelihood ------------------------------------------------------

    def _etas(self, theta: np.ndarray):
        """Linear predictors per block at an unconstrained theta."""
        lay = self.layout
        b0 = theta[lay.intercepts]
        u = us = None
        if lay.has_participant_effect:
            u = float(_exp_capped(theta[lay.log_sigma_u])) * theta[lay.z_u]
        if lay.has_school_effect:
            us = float(_exp_capped(theta[lay.log_sigma_s])) * theta[lay.z_s]
        etas = []
        for m, block in enumerate(self.blocks):
            eta = np.full(len(block.rows), b0[m])
            if block.n_slopes:
                eta += block.x @ theta[lay.slope_slices[m]]
            if u is not None:
                eta += u[block.rows]
            if us is not None:
                eta += us[self.dataset.cluster_index[block.rows]]
            etas.append(eta)
        return etas

    def log_likelihood(self, theta: np.ndarray) -> float:
        """Weighted Bernoulli log-likelihood, all blocks, stable log1p form."""
        total = 0.0
        for block, eta in zip(self.blocks, self._etas(theta)):
            total -= float(np.dot(block.w, np.logaddexp(0.0, (1.0 - 2.0 * block.y) * eta)))
        return total

    # -- posterior -------------------------------------------------------

    def log_posterior(self, theta: np.ndarray) -> LogDensityResult:
        """Log posterior density and its exact gradient (unconstrained space).

        Reduction order is fixed: blocks in declaration order, participants
        reduced by numpy dot within a block, so the value is deterministic.
        """
        lay = self.layout
        theta = np.asarray(theta, dtype=float)
        grad = np.zeros(lay.dim)
        value = 0.0

        sigma_u = u = g_u = None
        sigma_s = us = g_us = None
        if lay.has_participant_effect:
            sigma_u = float(_exp_capped(theta[lay.log_sigma_u]))
            u = sigma_u * theta[lay.z_u]
            g_u = np.zeros(self.dataset.n)
        if lay.has_school_effect:
            sigma_s = float(_exp_capped(theta[lay.log_sigma_s]))
            us = sigma_s * theta[lay.z_s]
            g_us = np.zeros(self.dataset.n_clusters)

        b0 = theta[lay.intercepts]
        cluster_index = self.dataset.cluster_index
        for m, block in enumerate(self.blocks):
            eta = np.full(len(block.rows), b0[m])
            if block.n_slopes:
                eta += block.x @ theta[lay.slope_slices[m]]
            if u is not None:
                eta += u[block.rows]
            if us is not None:
                eta += us[cluster_index[block.rows]]
            value -= float(np.dot(block.w, np.logaddexp(0.0, (1.0 - 2.0 * block.y) * eta)))
            resid = block.w * (block.y - expit(eta))
            grad[lay.intercepts.start + m] += resid.sum()
            if block.n_slopes:
                grad[lay.slope_slices[m]] += block.x.T @ resid
            if g_u is not None:
                g_u[block.rows] += resid
            if g_us is not None:
                g_us += np.bincount(cluster_index[block.rows], weights=resid,
                                    minlength=self.dataset.n_clusters)

        # intercepts ~ N(0, v)
        v = self.prior.intercept_variance
        value += -0.5 * len(b0) * (LOG_2PI + math.log(v)) - float(np.dot(b0, b0)) / (2.0 * v)
        grad[lay.intercepts] += -b0 / v

        # slopes + shrinkage scales (log-domain forms: finite for finite theta)
        beta = theta[lay.slopes]
        if beta.size:
            loglam = theta[lay.log_lambdas]
            lam = _exp_capped(loglam)
            absb = np.abs(beta)
            with np.errstate(divide="ignore"):
                log_absb = np.log(absb)
            if self.prior.slope_prior == "lasso":
                lam_absb = _exp_capped(loglam + log_absb)
                value += float(np.sum(loglam - math.log(2.0) - lam_absb))
                grad[lay.slopes] += -lam * np.sign(beta)
                grad[lay.log_lambdas] += 1.0 - lam_absb
            else:  # Student-t with 1 df, scale 1/lambda
                r = 2.0 * (loglam + log_absb)  # log(lambda^2 beta^2)
                value += float(np.sum(loglam - math.log(math.pi)
                                      - np.logaddexp(0.0, r)))
                frac = expit(r)  # q^2 / (1 + q^2)
                g_beta = np.zeros_like(beta)
                nz = absb > 0
                g_beta[nz] = -2.0 * frac[nz] / beta[nz]
                grad[lay.slopes] += g_beta
                grad[lay.log_lambdas] += 1.0 - 2.0 * frac
            # lambda ~ Half-Cauchy(0, s), sampled on the log scale
            r_hc = 2.0 * (loglam - np.log(self._shrink_scales))
            value += float(
                np.sum(np.log(2.0 / (math.pi * self._shrink_scales))
                       - np.logaddexp(0.0, r_hc) + loglam)
            )
            grad[lay.log_lambdas] += 1.0 - 2.0 * expit(r_hc)

        # random effects: non-centered z ~ N(0,1), scale ~ Half-Cauchy
        if lay.has_participant_effect:
            z = theta[lay.z_u]
            value += -0.5 * z.size * LOG_2PI - 0.5 * float(np.dot(z, z))
            grad[lay.z_u] += sigma_u * g_u - z
            hc_v, hc_g = _halfcauchy_logpdf_and_grad_logscale(
                theta[lay.log_sigma_u], self.prior.sigma_u_scale)
            value += hc_v
            grad[lay.log_sigma_u] += float(np.dot(u, g_u)) + hc_g
        if lay.has_school_effect:
            z = theta[lay.z_s]
            value += -0.5 * z.size * LOG_2PI - 0.5 * float(np.dot(z, z))
            grad[lay.z_s] += sigma_s * g_us - z
            hc_v, hc_g = _halfcauchy_logpdf_and_grad_logscale(
                theta[lay.log_sigma_s], self.prior.sigma_s_scale)
            value += hc_v
            grad[lay.log_sigma_s] += float(np.dot(us, g_us)) + hc_g

        if math.isnan(value):
            value = -math.inf
        return LogDensityResult(value=value, gradient=grad)

    def logp_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        r = self.log_posterior(theta)
        return r.value, r.gradient

    # -- constrained scale -------------------------------------------------

    def constrain(self, theta: np.ndarray) -> np.ndarray:
        """Map an unconstrained vector to the natural (constrained) scale."""
        lay = self.layout
        out = np.array(theta, dtype=float, copy=True)
        out[lay.log_lambdas] = _exp_capped(theta[lay.log_lambdas])
        if lay.has_participant_effect:
            sigma_u = float(_exp_capped(theta[lay.log_sigma_u]))
            out[lay.log_sigma_u] = sigma_u
            out[lay.z_u] = sigma_u * theta[lay.z_u]
        if lay.has_school_effect:
            sigma_s = float(_exp_capped(theta[lay.log_sigma_s]))
            out[lay.log_sigma_s] = sigma_s
            out[lay.z_s] = sigma_s * theta[lay.z_s]
        return out


def pooled_outcome_model(dataset: Dataset, outcome: str, predictor_names,
                         prior: PriorConfig) -> JointModel:
    """Single-block logistic model for one outcome over all its users.

    The participant random effect is omitted: with one outcome per
    participant it is not identifiable.  Used by the univariate baselines.
    """
    user_groups = ("A", "B") if outcome == "aud" else ("B", "C")
    rows = np.flatnonzero(np.isin(dataset.groups, user_groups))
    sub = dataset.subset(rows)
    # a single pooled block: reuse the group machinery by relabelling rows
    spec = SubModelSpec(group="B", outcome=outcome,
                        predictor_names=tuple(predictor_names))
    pooled = Dataset(
        schema=sub.schema,
        ids=sub.ids,
        groups=np.full(sub.n, "B"),
        cluster_ids=sub.cluster_ids,
        weights=sub.weights.copy(),
        y=sub.y.copy(),
        raw=sub.raw,
        scaled=sub.scaled,
        has_outcomes=sub.has_outcomes,
    )
    return JointModel(pooled, [spec], prior, include_participant_effect=False)


def linear_predictor(p: Participant, sub: SubModelSpec, params: dict) -> float:
    """eta for one participant under one sub-model.

    ``params`` maps parameter names (same naming as the posterior draw
    columns) to values; missing random-effect entries default to zero.
    """
    eta = params[f"intercept[{sub.key}]"]
    for nm in sub.predictor_names:
        if nm not in p.predictors:
            raise ModelError(f"participant {p.id}: missing predictor {nm!r}")
        eta += params[f"beta[{sub.key}:{nm}]"] * float(p.predictors[nm])
    eta += params.get(f"u[{p.id}]", 0.0)
    eta += params.get(f"u_school[{p.cluster_id}]", 0.0)
    return float(eta)
