"""Shared fixtures: Gaussian model builders and observation crafting."""

from __future__ import annotations

import pytest

from mecusum import DensitySpec, ExperimentModel


def gaussian_model(exp_id: int, post_mean: float, pre_mean: float = 0.0,
                   std: float = 1.0) -> ExperimentModel:
    return ExperimentModel(
        exp_id,
        DensitySpec("gaussian", pre_mean, std),
        DensitySpec("gaussian", post_mean, std),
    )


def obs_for(model: ExperimentModel, llr: float) -> float:
    """Observation whose log-likelihood ratio equals llr (equal-std pair)."""
    m0 = model.pre.mean
    m1 = model.post.mean
    if model.pre.std != model.post.std:
        raise ValueError("only equal-std pairs invert linearly")
    var = model.pre.std * model.pre.std
    return (llr * var + (m1 * m1 - m0 * m0) / 2.0) / (m1 - m0)


@pytest.fixture
def models2():
    return (gaussian_model(1, 0.75), gaussian_model(2, 1.0))


@pytest.fixture
def models3():
    return (gaussian_model(1, 0.5), gaussian_model(2, 0.75), gaussian_model(3, 1.0))
