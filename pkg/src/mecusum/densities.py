"""Observation models: density pairs, likelihood ratios, divergences, sampling.

Each experiment is a pre-change / post-change density pair. Everything else in
the package touches observations only through the log-likelihood ratio, so
this module is the single home for that arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate

GAUSSIAN = "gaussian"

_FAMILIES = (GAUSSIAN,)


@dataclass(frozen=True)
class DensitySpec:
    """A single observation density.

    Gaussian is the only built-in family. New families plug in through the
    dispatch points below: logpdf, sample, and _closed_form_kl (return None
    there to fall back to numeric integration).
    """

    family: str
    mean: float
    std: float

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ValueError(f"unsupported density family {self.family!r}")
        if not math.isfinite(self.mean):
            raise ValueError(f"mean must be finite, got {self.mean}")
        if not (math.isfinite(self.std) and self.std > 0.0):
            raise ValueError(f"std must be positive and finite, got {self.std}")

    def logpdf(self, x: float) -> float:
        z = (x - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - 0.5 * math.log(2.0 * math.pi)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.normal(self.mean, self.std))


@dataclass(frozen=True)
class ExperimentModel:
    """Pre/post-change density pair for one experiment.

    A higher id means higher information quality, i.e. a larger KL divergence
    between the post- and pre-change densities; validate_ordering checks this
    across a set of experiments.
    """

    id: int
    pre: DensitySpec
    post: DensitySpec

    def __post_init__(self) -> None:
        if not float(self.id).is_integer() or self.id < 1:
            raise ValueError(f"experiment id must be an integer >= 1, got {self.id}")
        object.__setattr__(self, "id", int(self.id))
        kl = kl_divergence(self)
        if not (math.isfinite(kl) and kl > 0.0):
            raise ValueError(
                f"experiment {self.id}: KL(post || pre) must be strictly positive "
                f"and finite, got {kl}"
            )


def llr_terms(model: ExperimentModel) -> tuple[float, float, float, float, float]:
    """Constants (c, q0, m0, q1, m1) with llr(x) = c + q0*(x-m0)^2 - q1*(x-m1)^2.

    Shared by log_likelihood_ratio and the simulation hot loops so every code
    path computes bit-identical ratios.
    """
    pre, post = model.pre, model.post
    return (
        math.log(pre.std / post.std),
        0.5 / (pre.std * pre.std),
        pre.mean,
        0.5 / (post.std * post.std),
        post.mean,
    )


def llr_from_terms(terms: tuple[float, float, float, float, float], x: float) -> float:
    c, q0, m0, q1, m1 = terms
    d0 = x - m0
    d1 = x - m1
    return c + q0 * d0 * d0 - q1 * d1 * d1


def log_likelihood_ratio(model: ExperimentModel, x: float) -> float:
    """log(f1(x) / f0(x)) for one observation. Rejects non-finite input."""
    if not math.isfinite(x):
        raise ValueError(f"observation must be finite, got {x}")
    return llr_from_terms(llr_terms(model), x)


def _closed_form_kl(pre: DensitySpec, post: DensitySpec) -> float | None:
    if pre.family == GAUSSIAN and post.family == GAUSSIAN:
        dm = post.mean - pre.mean
        v0 = pre.std * pre.std
        v1 = post.std * post.std
        return math.log(pre.std / post.std) + (v1 + dm * dm) / (2.0 * v0) - 0.5
    return None


def _numeric_kl(pre: DensitySpec, post: DensitySpec) -> float:
    # Adaptive quadrature at relative tolerance 1e-8; KL is never in a hot loop.
    def integrand(x: float) -> float:
        lp = post.logpdf(x)
        return math.exp(lp) * (lp - pre.logpdf(x))

    value, _ = integrate.quad(integrand, -math.inf, math.inf, epsrel=1e-8, limit=200)
    return value


def kl_divergence(model: ExperimentModel, method: str = "auto") -> float:
    """D(f1 || f0) for the experiment's post/pre pair.

    method "auto" uses the closed form when the family pair has one and falls
    back to numeric integration; "closed" and "numeric" force one route.
    """
    if method not in ("auto", "closed", "numeric"):
        raise ValueError(f"method must be 'auto', 'closed' or 'numeric', got {method!r}")
    if method != "numeric":
        value = _closed_form_kl(model.pre, model.post)
        if value is not None:
            return value
        if method == "closed":
            raise ValueError(
                f"no closed-form KL for family pair "
                f"({model.pre.family!r}, {model.post.family!r})"
            )
    value = _numeric_kl(model.pre, model.post)
    if not math.isfinite(value):
        raise ValueError(
            f"experiment {model.id}: KL divergence is not finite ({value}); "
            "the detection delay guarantees require 0 < KL < inf"
        )
    return value


def sample(model: ExperimentModel, regime: str, rng: np.random.Generator) -> float:
    """Draw one observation: regime "pre" uses f0, "post" uses f1."""
    if regime == "pre":
        return model.pre.sample(rng)
    if regime == "post":
        return model.post.sample(rng)
    raise ValueError(f"regime must be 'pre' or 'post', got {regime!r}")


@dataclass(frozen=True)
class OrderingViolation:
    """Adjacent pair of experiments whose KL divergences decrease with id."""

    lower_id: int
    upper_id: int
    lower_kl: float
    upper_kl: float

    def __str__(self) -> str:
        return (
            f"experiments ({self.lower_id}, {self.upper_id}) violate the quality "
            f"ordering: KL {self.lower_kl:.6g} > {self.upper_kl:.6g}"
        )


def validate_ordering(models: Sequence[ExperimentModel]) -> OrderingViolation | None:
    """Check ids are contiguous 1..m and KL divergence is non-decreasing in id.

    Structural problems (empty input, duplicate or missing ids) raise; a
    quality-ordering violation is returned as a report, not raised.
    """
    if not models:
        raise ValueError("at least one experiment model is required")
    ids = sorted(mdl.id for mdl in models)
    if ids != list(range(1, len(models) + 1)):
        raise ValueError(f"experiment ids must be contiguous 1..m, got {ids}")
    by_id = sorted(models, key=lambda mdl: mdl.id)
    for lower, upper in zip(by_id, by_id[1:]):
        kl_lower = kl_divergence(lower)
        kl_upper = kl_divergence(upper)
        if kl_upper < kl_lower:
            return OrderingViolation(lower.id, upper.id, kl_lower, kl_upper)
    return None


def density_to_dict(spec: DensitySpec) -> dict:
    return {"family": spec.family, "mean": spec.mean, "std": spec.std}


def density_from_dict(data: dict) -> DensitySpec:
    extra = set(data) - {"family", "mean", "std"}
    if extra:
        raise ValueError(f"unknown density fields: {sorted(extra)}")
    try:
        return DensitySpec(data["family"], float(data["mean"]), float(data["std"]))
    except KeyError as exc:
        raise ValueError(f"density spec is missing field {exc.args[0]!r}") from None


def model_to_dict(model: ExperimentModel) -> dict:
    return {
        "id": model.id,
        "pre": density_to_dict(model.pre),
        "post": density_to_dict(model.post),
    }


def model_from_dict(data: dict) -> ExperimentModel:
    extra = set(data) - {"id", "pre", "post"}
    if extra:
        raise ValueError(f"unknown experiment fields: {sorted(extra)}")
    try:
        return ExperimentModel(
            int(data["id"]),
            density_from_dict(data["pre"]),
            density_from_dict(data["post"]),
        )
    except KeyError as exc:
        raise ValueError(f"experiment model is missing field {exc.args[0]!r}") from None
