"""Monte Carlo estimators: false-alarm rate, detection delay, observation cost.

Two independent routes exist for the post-change-free observation rate (POR):
estimate_por_direct drives the engine over long pre-change episodes, while
estimate_por_renewal transcribes the regenerative cycle structure directly
(top-level excursion, then the recursive truncated sub-policy below) without
touching the engine. The two cross-check each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .densities import GAUSSIAN, ExperimentModel, llr_from_terms, llr_terms
from .engine import PolicyParams, RssParams, resolve_truncation
from .simulate import Scenario, episode_summary, seed_entropy

RENEWAL_TAG = 3

_BLOCK = 4096


@dataclass(frozen=True)
class MetricEstimate:
    """Sample mean with a normal-approximation confidence interval."""

    mean: float
    std_error: float
    trials: int
    ci: tuple[float, float]
    confidence: float
    horizon_hits: int = 0  # episodes cut off at the safety horizon (estimate is a lower bound)


@dataclass(frozen=True)
class WaddEstimate(MetricEstimate):
    """Delay estimate: simulated mean plus the analytic truncation penalty."""

    sim_mean: float = 0.0
    penalty: float = 0.0


@dataclass(frozen=True)
class PorVector:
    """Per-experiment observation-rate estimates, keyed by experiment id.

    Key 0 is the idle fraction and is present only for data-efficient
    policies. The means sum to 1 up to Monte Carlo error.
    """

    components: dict[int, MetricEstimate]

    def __getitem__(self, key: int) -> MetricEstimate:
        return self.components[key]

    def means(self) -> dict[int, float]:
        return {k: v.mean for k, v in self.components.items()}


def _z_value(confidence: float) -> float:
    if not (0.0 < confidence < 1.0):
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    return float(norm.ppf(0.5 + confidence / 2.0))


def _estimate(values: np.ndarray, confidence: float, horizon_hits: int = 0) -> MetricEstimate:
    n = len(values)
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    z = _z_value(confidence)
    return MetricEstimate(mean, se, n, (mean - z * se, mean + z * se), confidence, horizon_hits)


def _trial_seed(base_seed, trial: int) -> tuple[int, ...]:
    return seed_entropy(base_seed) + (trial,)


def _default_safety_horizon(A: float) -> int:
    # 10^4 times the false-alarm target implied by the threshold; the cap on
    # the exponent only guards math.exp overflow for absurd thresholds.
    return int(10_000.0 * math.exp(min(A, 700.0)))


def estimate_arlfa(
    params: PolicyParams | RssParams,
    models: Sequence[ExperimentModel],
    trials: int,
    base_seed: int | Sequence[int],
    *,
    confidence: float = 0.95,
    safety_horizon: int | None = None,
) -> MetricEstimate:
    """Mean time to a false alarm: episodes with no change ever.

    Episodes still running at the safety horizon are counted at the horizon
    and reported in horizon_hits, making the estimate a lower bound.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not math.isfinite(params.A):
        raise ValueError("false-alarm estimation needs a finite threshold")
    if safety_horizon is None:
        safety_horizon = _default_safety_horizon(params.A)
    scenario = Scenario(tuple(models), math.inf, horizon=safety_horizon)
    taus = np.empty(trials)
    hits = 0
    for t in range(trials):
        summary = episode_summary(params, scenario, _trial_seed(base_seed, t))
        if summary.stopping_time is None:
            hits += 1
            taus[t] = safety_horizon
        else:
            taus[t] = summary.stopping_time
    return _estimate(taus, confidence, hits)


def wadd_penalty(params: PolicyParams | RssParams) -> float:
    """Worst-case delay penalty for the level budgets, at nominal values.

    The worst pre-change state leaves every level fully loaded, so the
    penalty sums, over each level below the top, the product of the budgets
    on the path down to it. Zero for single-level and RSS policies.
    """
    if isinstance(params, RssParams):
        return 0.0
    lowest = 0 if params.data_efficient else 1
    total = 0.0
    prod = 1.0
    for j in range(params.m - 1, lowest - 1, -1):
        prod *= params.budgets[j]
        total += prod
    return total


def estimate_wadd(
    params: PolicyParams | RssParams,
    models: Sequence[ExperimentModel],
    trials: int,
    base_seed: int | Sequence[int],
    *,
    confidence: float = 0.95,
    safety_horizon: int | None = None,
) -> WaddEstimate:
    """Worst-case average detection delay: change at n = 1 plus the budget penalty."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not math.isfinite(params.A):
        raise ValueError("delay estimation needs a finite threshold")
    if safety_horizon is None:
        safety_horizon = _default_safety_horizon(params.A)
    scenario = Scenario(tuple(models), 1, horizon=safety_horizon)
    taus = np.empty(trials)
    hits = 0
    for t in range(trials):
        summary = episode_summary(params, scenario, _trial_seed(base_seed, t))
        if summary.stopping_time is None:
            hits += 1
            taus[t] = safety_horizon
        else:
            taus[t] = summary.stopping_time
    base = _estimate(taus, confidence, hits)
    penalty = wadd_penalty(params)
    return WaddEstimate(
        mean=base.mean + penalty,
        std_error=base.std_error,
        trials=base.trials,
        ci=(base.ci[0] + penalty, base.ci[1] + penalty),
        confidence=base.confidence,
        horizon_hits=base.horizon_hits,
        sim_mean=base.mean,
        penalty=penalty,
    )


def _disable_threshold(params: PolicyParams | RssParams):
    if isinstance(params, RssParams):
        return replace(params, A=math.inf)
    return replace(params, A=math.inf, top_truncation=None)


def estimate_por_direct(
    params: PolicyParams | RssParams,
    models: Sequence[ExperimentModel],
    horizon: int,
    trials: int,
    base_seed: int | Sequence[int],
    *,
    confidence: float = 0.95,
) -> PorVector:
    """Observation rates from long pre-change runs with the threshold disabled.

    Renewal resets still happen whenever the statistic returns to the top
    level; only the stopping rule is switched off.
    """
    if horizon < 10_000:
        raise ValueError(f"direct estimation needs horizon >= 10000, got {horizon}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    free = _disable_threshold(params)
    scenario = Scenario(tuple(models), math.inf, horizon=horizon)
    keys = [mdl.id for mdl in sorted(models, key=lambda mdl: mdl.id)]
    if isinstance(params, PolicyParams) and params.data_efficient:
        keys = [0] + keys
    fractions = {k: np.empty(trials) for k in keys}
    for t in range(trials):
        summary = episode_summary(free, scenario, _trial_seed(base_seed, t))
        for k in keys:
            fractions[k][t] = summary.counts[k] / horizon
    return PorVector({k: _estimate(fractions[k], confidence) for k in keys})


class _BlockNormal:
    __slots__ = ("gen", "buf", "pos")

    def __init__(self, gen: np.random.Generator) -> None:
        self.gen = gen
        self.buf = gen.standard_normal(_BLOCK).tolist()
        self.pos = 0

    def next(self) -> float:
        i = self.pos
        if i == _BLOCK:
            self.buf = self.gen.standard_normal(_BLOCK).tolist()
            i = 0
        v = self.buf[i]
        self.pos = i + 1
        return v


class _RenewalKernel:
    """One regenerative cycle at a time, written straight from the cycle
    structure: a zero-floor excursion at the top level, then the recursive
    truncated sub-policy opened by the undershoot. Engine-free on purpose."""

    def __init__(self, params: PolicyParams, models: Sequence[ExperimentModel], base_seed) -> None:
        m = params.m
        self.m = m
        self.de = params.data_efficient
        self.mu = params.mu if params.mu is not None else 0.0
        self.a = [0.0] * (m + 1)
        for i, v in params.scales.items():
            self.a[i] = v
        self.N = [0.0] * max(m, 1)
        for j, v in params.budgets.items():
            self.N[j] = v
        by_id = sorted(models, key=lambda mdl: mdl.id)
        entropy = seed_entropy(base_seed) + (RENEWAL_TAG,)
        children = np.random.SeedSequence(entropy).spawn(m + 1)
        self.draw = [None]
        self.terms = [None]
        for idx, mdl in enumerate(by_id):
            gen = np.random.Generator(np.random.Philox(children[idx]))
            if mdl.pre.family == GAUSSIAN:
                block = _BlockNormal(gen)
                mean, std = mdl.pre.mean, mdl.pre.std
                self.draw.append(lambda b=block, mn=mean, sd=std: mn + sd * b.next())
            else:
                spec = mdl.pre
                self.draw.append(lambda s=spec, g=gen: s.sample(g))
            self.terms.append(llr_terms(mdl))
        self.budget_rng = np.random.Generator(np.random.Philox(children[m]))

    def cycle(self) -> list[float]:
        """Steps spent at each source (index 0 = idle) during one cycle."""
        out = [0.0] * (self.m + 1)
        m = self.m
        draw = self.draw[m]
        terms = self.terms[m]
        d = 0.0
        while True:
            d += llr_from_terms(terms, draw())
            out[m] += 1.0
            if d < 0.0:
                break
        if m > 1 or self.de:
            self._sub(m - 1, self.a[m] * d, 0.0, out)
        return out

    def _sub(self, j: int, floor: float, ceiling: float, out: list[float]) -> None:
        budget = resolve_truncation(self.N[j], self.budget_rng)
        if budget == 0:
            return
        used = 0
        d = floor
        if j == 0:
            mu = self.mu
            while True:
                d += mu
                out[0] += 1.0
                used += 1
                if d > ceiling or used == budget:
                    return
        draw = self.draw[j]
        terms = self.terms[j]
        reflects = j == 1 and not self.de
        while True:
            d += llr_from_terms(terms, draw())
            out[j] += 1.0
            used += 1
            if reflects and d < floor:
                d = floor
            if d > ceiling:
                return
            if d < floor:
                # the budget-consuming observation may still open the level
                # below; the exhaustion return happens once it closes
                self._sub(j - 1, floor + self.a[j] * (d - floor), floor, out)
                d = floor
            if used == budget:
                return


def _ratio_estimate(x: np.ndarray, y: np.ndarray, confidence: float) -> MetricEstimate:
    # Ratio of means with a delta-method standard error.
    n = len(x)
    ybar = float(np.mean(y))
    r = float(np.sum(x) / np.sum(y))
    if n > 1:
        sxx = float(np.var(x, ddof=1))
        syy = float(np.var(y, ddof=1))
        sxy = float(np.cov(x, y, ddof=1)[0, 1])
        var = (sxx - 2.0 * r * sxy + r * r * syy) / (n * ybar * ybar)
        se = math.sqrt(max(var, 0.0))
    else:
        se = 0.0
    z = _z_value(confidence)
    return MetricEstimate(r, se, n, (r - z * se, r + z * se), confidence)


def estimate_por_renewal(
    params: PolicyParams,
    models: Sequence[ExperimentModel],
    cycles: int,
    base_seed: int | Sequence[int],
    *,
    confidence: float = 0.95,
) -> PorVector:
    """Observation rates as ratios of expected per-cycle times.

    Uses the regenerative structure of the pre-change run: the expected
    fraction of steps an experiment takes equals its expected steps per
    renewal cycle over the expected cycle length.
    """
    if not isinstance(params, PolicyParams):
        raise ValueError("renewal estimation is defined for engine policies, not RSS")
    if cycles < 100:
        raise ValueError(f"renewal estimation needs cycles >= 100, got {cycles}")
    if params.top_truncation is not None:
        raise ValueError("renewal estimation assumes an untruncated top level")
    kernel = _RenewalKernel(params, models, base_seed)
    times = np.empty((cycles, params.m + 1))
    for k in range(cycles):
        times[k] = kernel.cycle()
    totals = times.sum(axis=1)
    keys = list(range(1, params.m + 1))
    if params.data_efficient:
        keys = [0] + keys
    return PorVector(
        {k: _ratio_estimate(times[:, k], totals, confidence) for k in keys}
    )


@dataclass(frozen=True)
class TradeoffPoint:
    gamma: float
    log_arlfa: float
    wadd: float
    wadd_se: float
    arlfa: MetricEstimate
    wadd_estimate: WaddEstimate


def tradeoff_curve(
    params: PolicyParams | RssParams,
    models: Sequence[ExperimentModel],
    gammas: Sequence[float],
    trials: int,
    base_seed: int | Sequence[int],
    *,
    confidence: float = 0.95,
) -> list[TradeoffPoint]:
    """(log false-alarm time, delay) pairs along a grid of targets.

    Each grid point re-thresholds the same policy at A = ln(gamma); the rest
    of the parameters stay fixed.
    """
    if len(gammas) == 0:
        raise ValueError("the gamma grid must not be empty")
    if any(g2 <= g1 for g1, g2 in zip(gammas, gammas[1:])):
        raise ValueError(f"the gamma grid must be strictly increasing, got {list(gammas)}")
    if any(g < 1.0 for g in gammas):
        raise ValueError("gamma values must be >= 1")
    points = []
    base = seed_entropy(base_seed)
    for k, gamma in enumerate(gammas):
        athr = math.log(gamma)
        p = replace(params, A=athr)
        arlfa = estimate_arlfa(p, models, trials, base + (100, k), confidence=confidence)
        wadd = estimate_wadd(p, models, trials, base + (200, k), confidence=confidence)
        points.append(
            TradeoffPoint(gamma, math.log(arlfa.mean), wadd.mean, wadd.std_error, arlfa, wadd)
        )
    return points
