import math

import numpy as np
import pytest
from scipy.stats import halfcauchy, laplace, norm

from risk_engine.data import Dataset, PredictorSpec, Schema
from risk_engine.model import (
    JointModel,
    ModelError,
    PriorConfig,
    SubModelSpec,
    default_joint_spec,
    linear_predictor,
    pooled_outcome_model,
)

from conftest import make_dataset


def naive_bernoulli_loglik(dataset, submodels, params, weighted=True):
    """Independent reference implementation: plain python loops."""
    total = 0.0
    by_key = {s.key: s for s in submodels}
    for i in range(dataset.n):
        p = dataset.participant(i)
        w = p.weight if weighted else 1.0
        for outcome in ("aud", "cud"):
            sub = by_key[f"{p.group}:{outcome}"]
            eta = params[f"intercept[{sub.key}]"]
            for nm in sub.predictor_names:
                eta += params[f"beta[{sub.key}:{nm}]"] * p.predictors[nm]
            eta += params.get(f"u[{p.id}]", 0.0)
            eta += params.get(f"u_school[{p.cluster_id}]", 0.0)
            prob = 1.0 / (1.0 + math.exp(-eta))
            y = p.outcomes[outcome]
            total += w * (y * math.log(prob) + (1 - y) * math.log(1.0 - prob))
    return total


def participant(group="B", predictors=None, pid="p0", cluster="s0"):
    from risk_engine.data import Participant

    return Participant(id=pid, group=group, cluster_id=cluster, weight=1.0,
                       predictors=predictors or {}, outcomes={"aud": 0, "cud": 0})


class TestLinearPredictor:
    def test_all_zero(self):
        sub = SubModelSpec(group="B", outcome="aud", predictor_names=("x1", "x2"))
        p = participant(predictors={"x1": 0.4, "x2": 1.0})
        params = {"intercept[B:aud]": 0.0, "beta[B:aud:x1]": 0.0,
                  "beta[B:aud:x2]": 0.0}
        assert linear_predictor(p, sub, params) == 0.0

    def test_intercept_only(self):
        sub = SubModelSpec(group="A", outcome="cud")
        p = participant(group="A")
        assert linear_predictor(p, sub, {"intercept[A:cud]": -17.21}) == -17.21

    def test_hand_sum(self):
        # intercept -6.83 plus a unit binary effect of 0.76
        sub = SubModelSpec(group="B", outcome="aud", predictor_names=("male",))
        p = participant(predictors={"male": 1.0})
        params = {"intercept[B:aud]": -6.83, "beta[B:aud:male]": 0.76}
        assert linear_predictor(p, sub, params) == pytest.approx(-6.07, abs=1e-12)

    def test_random_effects_added(self):
        sub = SubModelSpec(group="B", outcome="aud")
        p = participant(pid="q7", cluster="sch3")
        params = {"intercept[B:aud]": 1.0, "u[q7]": 0.5, "u_school[sch3]": -0.25}
        assert linear_predictor(p, sub, params) == pytest.approx(1.25)

    def test_missing_predictor(self):
        sub = SubModelSpec(group="B", outcome="aud", predictor_names=("nope",))
        p = participant(predictors={"x1": 0.1})
        with pytest.raises(ModelError, match="missing predictor"):
            linear_predictor(p, sub, {"intercept[B:aud]": 0.0})


class TestLikelihood:
    def _model(self, dataset, submodels, prior=None):
        prior = prior or PriorConfig(include_school_effect=True)
        return JointModel(dataset, submodels, prior)

    def test_half_probability_case(self, toy_schema, toy_submodels, t_prior):
        # single group-B participant, eta = 0 for both outcomes
        y = np.zeros((1, 2))
        y[0, 0] = 1
        d = make_dataset(toy_schema, n=1, groups_p=(0, 1, 0), y=y)
        model = self._model(d, toy_submodels, t_prior)
        theta = np.zeros(model.dim)
        # both outcomes contribute log(1/2) each at eta = 0
        assert model.log_likelihood(theta) == pytest.approx(2 * math.log(0.5), rel=1e-12)

    def test_weight_normalization_invariance(self, toy_schema, toy_submodels, t_prior):
        from risk_engine.data import normalize_weights

        d1 = normalize_weights(make_dataset(toy_schema, n=30, seed=1,
                                            weights=np.full(30, 1.7)))
        d2 = normalize_weights(make_dataset(toy_schema, n=30, seed=1,
                                            weights=np.full(30, 3.4)))
        m1 = self._model(d1, toy_submodels, t_prior)
        m2 = self._model(d2, toy_submodels, t_prior)
        rng = np.random.default_rng(0)
        theta = rng.uniform(-1, 1, m1.dim)
        assert m1.log_likelihood(theta) == pytest.approx(m2.log_likelihood(theta),
                                                         rel=1e-12)

    def test_zero_weight_contributes_nothing(self, toy_schema, toy_submodels, t_prior):
        w = np.ones(20)
        w[3] = 0.0
        d = make_dataset(toy_schema, n=20, seed=2, weights=w)
        model = self._model(d, toy_submodels, t_prior)
        rng = np.random.default_rng(1)
        theta = rng.uniform(-1, 1, model.dim)
        params = dict(zip(model.layout.names, model.constrain(theta)))
        # the naive sum over the 19 weighted participants matches exactly
        keep = [i for i in range(20) if i != 3]
        expected = 0.0
        by_key = {s.key: s for s in toy_submodels}
        for i in keep:
            p = d.participant(i)
            for outcome in ("aud", "cud"):
                sub = by_key[f"{p.group}:{outcome}"]
                eta = linear_predictor(p, sub, params)
                prob = 1.0 / (1.0 + np.exp(-eta))
                y = p.outcomes[outcome]
                expected += p.weight * (y * np.log(prob) + (1 - y) * np.log(1 - prob))
        assert model.log_likelihood(theta) == pytest.approx(expected, rel=1e-10)

    def test_naive_oracle_equivalence(self, toy_schema, toy_submodels, t_prior):
        d = make_dataset(toy_schema, n=50, seed=7,
                         weights=np.random.default_rng(8).uniform(0.2, 3, 50))
        from risk_engine.data import normalize_weights

        d = normalize_weights(d)
        model = self._model(d, toy_submodels, t_prior)
        rng = np.random.default_rng(3)
        theta = rng.uniform(-1.5, 1.5, model.dim)
        params = dict(zip(model.layout.names, model.constrain(theta)))
        expected = naive_bernoulli_loglik(d, toy_submodels, params)
        assert model.log_likelihood(theta) == pytest.approx(expected, rel=1e-10)

    def test_zero_random_effects_match_plain_logistic(self, toy_schema,
                                                      toy_submodels, t_prior):
        d = make_dataset(toy_schema, n=40, seed=9)
        model = self._model(d, toy_submodels, t_prior)
        lay = model.layout
        rng = np.random.default_rng(4)
        theta = rng.uniform(-1, 1, model.dim)
        theta[lay.z_u] = 0.0
        theta[lay.z_s] = 0.0
        params = dict(zip(lay.names, model.constrain(theta)))
        params = {k: v for k, v in params.items()
                  if not k.startswith(("u[", "u_school["))}
        expected = naive_bernoulli_loglik(d, toy_submodels, params)
        assert model.log_likelihood(theta) == pytest.approx(expected, rel=1e-10)

    def test_structural_zero_terms_included(self, toy_schema, toy_submodels, t_prior):
        # the group-A second-outcome block contributes through its intercept
        d = make_dataset(toy_schema, n=15, seed=11, groups_p=(1, 0, 0))
        model = self._model(d, toy_submodels, t_prior)
        theta = np.zeros(model.dim)
        base = model.log_likelihood(theta)
        theta2 = theta.copy()
        idx = model.layout.names.index("intercept[A:cud]")
        theta2[idx] = -8.0
        assert model.log_likelihood(theta2) > base  # all-zero outcomes prefer small p


class TestLogPosterior:
    @pytest.mark.parametrize("prior_kind", ["lasso", "student_t"])
    def test_gradient_matches_finite_differences(self, toy_schema, toy_submodels,
                                                 prior_kind):
        d = make_dataset(toy_schema, n=25, seed=5)
        prior = PriorConfig(slope_prior=prior_kind, include_school_effect=True)
        model = JointModel(d, toy_submodels, prior)
        rng = np.random.default_rng(6)
        theta = rng.uniform(-2, 2, model.dim)
        sl = theta[model.layout.slopes]
        sl[np.abs(sl) < 1e-3] = 0.1  # stay off the lasso kink
        theta[model.layout.slopes] = sl
        res = model.log_posterior(theta)
        h = 1e-5
        for j in range(model.dim):
            tp = theta.copy()
            tp[j] += h
            tm = theta.copy()
            tm[j] -= h
            fd = (model.log_posterior(tp).value - model.log_posterior(tm).value) / (2 * h)
            rel = abs(res.gradient[j] - fd) / max(1.0, abs(fd))
            assert rel < 1e-6, (model.layout.names[j], res.gradient[j], fd)

    def test_empty_dataset_gives_pure_prior(self, toy_schema):
        d = make_dataset(toy_schema, n=0, seed=0)
        submodels = [SubModelSpec(group=g, outcome=oc)
                     for g in "ABC" for oc in ("aud", "cud")]
        prior = PriorConfig(slope_prior="lasso", include_school_effect=False)
        model = JointModel(d, submodels, prior)
        theta = np.array([0.5, -1.0, 0.2, 0.0, 1.0, -0.3, 0.7])  # 6 b0 + log sigma_u
        value = model.log_posterior(theta).value
        expected = norm(scale=10.0).logpdf(theta[:6]).sum()
        sigma_u = math.exp(0.7)
        expected += halfcauchy(scale=4.0).logpdf(sigma_u) + 0.7  # + jacobian
        assert value == pytest.approx(expected, rel=1e-12)

    def test_lasso_prior_at_zero(self, toy_schema):
        # slope prior contributes log(1/2) at beta=0, lambda=1
        d = make_dataset(toy_schema, n=0, seed=0)
        submodels = [SubModelSpec(group=g, outcome=oc,
                                  predictor_names=("x1",) if (g, oc) == ("B", "aud") else ())
                     for g in "ABC" for oc in ("aud", "cud")]
        prior = PriorConfig(slope_prior="lasso", include_school_effect=False)
        model = JointModel(d, submodels, prior)
        lay = model.layout
        theta = np.zeros(model.dim)
        value = model.log_posterior(theta).value
        expected = norm(scale=10.0).logpdf(0.0) * 6
        expected += laplace(scale=1.0).logpdf(0.0)  # = log(1/2)
        expected += halfcauchy(scale=1.0).logpdf(1.0) + 0.0  # lambda=1, log-jacobian 0
        expected += halfcauchy(scale=4.0).logpdf(1.0) + 0.0  # sigma_u at log-scale 0
        assert value == pytest.approx(expected, rel=1e-12)

    def test_permutation_invariance(self, toy_schema, toy_submodels, t_prior):
        d = make_dataset(toy_schema, n=30, seed=12)
        prior = PriorConfig(slope_prior="student_t", include_school_effect=False)
        model = JointModel(d, toy_submodels, prior)
        rng = np.random.default_rng(13)
        theta = rng.uniform(-1, 1, model.dim)
        lay = model.layout
        perm = rng.permutation(30)
        d2 = d.subset(perm)
        model2 = JointModel(d2, toy_submodels, prior)
        theta2 = theta.copy()
        theta2[lay.z_u] = theta[lay.z_u][perm]
        v1 = model.log_posterior(theta).value
        v2 = model2.log_posterior(theta2).value
        assert v1 == pytest.approx(v2, rel=1e-10)

    def test_finite_everywhere(self, toy_schema, toy_submodels):
        d = make_dataset(toy_schema, n=12, seed=14)
        for kind in ("lasso", "student_t"):
            model = JointModel(d, toy_submodels,
                               PriorConfig(slope_prior=kind, include_school_effect=True))
            rng = np.random.default_rng(15)
            for scale in (1.0, 30.0, 300.0):
                theta = rng.uniform(-scale, scale, model.dim)
                res = model.log_posterior(theta)
                assert math.isfinite(res.value)
                assert np.all(np.isfinite(res.gradient))


class TestSpecBuilding:
    def test_default_joint_spec_sizes(self, toy_schema):
        specs = default_joint_spec(toy_schema, {
            "A:aud": ["x1", "x2"], "B:aud": ["x1", "x2"], "B:cud": ["x1"],
        })
        sizes = {s.key: len(s.predictor_names) for s in specs}
        assert sizes == {"A:aud": 2, "A:cud": 0, "B:aud": 2, "B:cud": 1,
                         "C:aud": 0, "C:cud": 0}
        scales = {s.key: s.shrink_scale for s in specs}
        assert scales["A:cud"] == 5.0 and scales["C:aud"] == 5.0
        assert scales["A:aud"] == 1.0

    def test_empty_config_gives_intercept_only(self, toy_schema):
        specs = default_joint_spec(toy_schema, {})
        assert all(len(s.predictor_names) == 0 for s in specs)
        assert len(specs) == 6

    def test_structural_zero_predictors_warn(self, toy_schema):
        with pytest.warns(UserWarning, match="structural zero"):
            specs = default_joint_spec(toy_schema, {"C:aud": ["x1"]})
        spec = next(s for s in specs if s.key == "C:aud")
        assert spec.shrink_scale == 5.0

    def test_unknown_predictor_rejected(self, toy_schema):
        with pytest.raises(ModelError, match="unknown predictor"):
            default_joint_spec(toy_schema, {"B:aud": ["zzz"]})

    def test_wrong_shrink_scale_rejected(self):
        with pytest.raises(ModelError, match="shrink_scale"):
            SubModelSpec(group="A", outcome="cud", shrink_scale=1.0)


class TestPooledModel:
    def test_no_participant_effect(self, toy_schema, toy_dataset):
        prior = PriorConfig(include_school_effect=False)
        model = pooled_outcome_model(toy_dataset, "aud", ("x1",), prior)
        assert not model.layout.has_participant_effect
        n_users = int((toy_dataset.groups != "C").sum())
        assert model.dataset.n == n_users

    def test_matches_plain_logistic_loglik(self, toy_schema, toy_dataset):
        prior = PriorConfig(include_school_effect=False)
        model = pooled_outcome_model(toy_dataset, "aud", ("x1", "x2"), prior)
        rng = np.random.default_rng(16)
        theta = rng.uniform(-1, 1, model.dim)
        b0 = theta[0]
        beta = theta[model.layout.slopes]
        rows = np.flatnonzero(np.isin(toy_dataset.groups, ("A", "B")))
        x = toy_dataset.design_columns(("x1", "x2"))[rows]
        y = toy_dataset.y[rows, 0]
        eta = b0 + x @ beta
        expected = float(np.sum(y * np.log(1 / (1 + np.exp(-eta)))
                                + (1 - y) * np.log(1 - 1 / (1 + np.exp(-eta)))))
        assert model.log_likelihood(theta) == pytest.approx(expected, rel=1e-10)
