import numpy as np
import pytest

from risk_engine.data import Dataset, PredictorSpec, Schema
from risk_engine.model import PriorConfig, SubModelSpec
from risk_engine.sampler import SamplerConfig


@pytest.fixture
def toy_schema():
    return Schema(predictors=(
        PredictorSpec(name="x1", kind="continuous", scaling_max=1.0),
        PredictorSpec(name="x2", kind="binary"),
    ))


def make_dataset(schema, n=60, seed=0, n_clusters=4, groups_p=(0.3, 0.6, 0.1),
                 weights=None, y=None):
    rng = np.random.default_rng(seed)
    groups = rng.choice(["A", "B", "C"], size=n, p=list(groups_p))
    if y is None:
        y = np.zeros((n, 2))
        y[:, 0] = rng.integers(0, 2, n)
        y[:, 1] = rng.integers(0, 2, n)
    y[groups == "A", 1] = 0
    y[groups == "C", 0] = 0
    raw = {}
    for p in schema.predictors:
        if p.kind == "continuous":
            raw[p.name] = rng.uniform(0, 1, n)
        elif p.kind == "binary":
            raw[p.name] = rng.integers(0, 2, n).astype(float)
        else:
            raw[p.name] = rng.choice(list(p.levels), size=n)
    return Dataset(
        schema=schema,
        ids=tuple(f"p{i}" for i in range(n)),
        groups=groups,
        cluster_ids=tuple(f"s{i % n_clusters}" for i in range(n)),
        weights=np.ones(n) if weights is None else np.asarray(weights, float),
        y=y,
        raw=raw,
    )


@pytest.fixture
def toy_dataset(toy_schema):
    return make_dataset(toy_schema)


@pytest.fixture
def toy_submodels():
    return [
        SubModelSpec(group="A", outcome="aud", predictor_names=("x1", "x2")),
        SubModelSpec(group="A", outcome="cud"),
        SubModelSpec(group="B", outcome="aud", predictor_names=("x1", "x2")),
        SubModelSpec(group="B", outcome="cud", predictor_names=("x1",)),
        SubModelSpec(group="C", outcome="aud"),
        SubModelSpec(group="C", outcome="cud", predictor_names=("x2",)),
    ]


@pytest.fixture
def t_prior():
    return PriorConfig(slope_prior="student_t", include_school_effect=True)


@pytest.fixture
def light_sampler():
    return SamplerConfig(chains=1, warmup_iters=150, sampling_iters=150, seed=0)
