"""Parameter search: hit target observation rates at a given false-alarm level.

The search leans on a decoupling property of the level stack: the time spent
at any level per renewal cycle is unaffected by the budgets and scales of the
levels below it. Budgets are therefore solved one level at a time from the
top down, each by bisection on the ratio of that level's rate to the top
level's rate; when a budget saturates (the level's reachable time tops out
below the target), the scale feeding that level is escalated by 10x and the
bisection restarts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

from .densities import ExperimentModel, validate_ordering
from .engine import PolicyParams
from .metrics import PorVector, estimate_por_renewal
from .simulate import seed_entropy

_SUM_EPS = 1e-9


def set_threshold(gamma: float) -> float:
    """Threshold for a false-alarm target: A = ln(gamma).

    gamma = 1 gives the degenerate A = 0 (stop almost immediately) and is
    allowed with a warning; gamma < 1 is rejected.
    """
    if math.isnan(gamma) or gamma < 1.0:
        raise ValueError(f"the false-alarm target gamma must be >= 1, got {gamma}")
    if gamma == 1.0:
        warnings.warn("gamma = 1 gives threshold 0: the policy stops almost immediately")
    return math.log(gamma)


@dataclass(frozen=True)
class CalibrationTarget:
    """Target observation rates keyed by experiment id.

    For non-data-efficient policies the targets must sum to 1; exactly one
    experiment may be omitted and gets the remaining mass. Data-efficient
    policies need every experiment listed, with the strict remainder to 1
    becoming the idle-fraction target.
    """

    gamma: float
    betas: dict[int, float]
    data_efficient: bool = False

    def __post_init__(self) -> None:
        if math.isnan(self.gamma) or self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        betas = {int(k): float(v) for k, v in self.betas.items()}
        object.__setattr__(self, "betas", betas)
        for k, v in betas.items():
            if k < 1:
                raise ValueError(f"beta keys are experiment ids >= 1, got {k}")
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"beta_{k} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class CalibrationConfig:
    tolerance: float = 0.02
    search_cycles: int = 50_000
    final_cycles: int = 200_000
    max_evaluations: int = 300
    budget_cap: float = 4096.0
    scale_cap: float = 1e5
    mu: float = 0.1
    initial_scale: float = 1.0


@dataclass(frozen=True)
class CalibrationResult:
    params: PolicyParams
    achieved: PorVector
    residuals: dict[int, float]  # achieved minus target, key 0 = idle fraction
    evaluations: int
    converged: bool


def _resolve_betas(target: CalibrationTarget, m: int) -> dict[int, float]:
    """Full target vector over ids 1..m (plus 0 for the idle fraction if DE)."""
    betas = dict(target.betas)
    unknown = set(betas) - set(range(1, m + 1))
    if unknown:
        raise ValueError(f"beta targets name unknown experiments: {sorted(unknown)}")
    if m not in betas:
        raise ValueError(f"a target for the top experiment beta_{m} is required")
    if betas[m] <= 0.0:
        raise ValueError(f"beta_{m} must be strictly positive, got {betas[m]}")
    total = sum(betas.values())
    if total > 1.0 + _SUM_EPS:
        raise ValueError(f"beta targets sum to {total:.6g} > 1: infeasible")
    missing = [i for i in range(1, m + 1) if i not in betas]
    if target.data_efficient:
        if missing:
            raise ValueError(
                f"data-efficient targets need every experiment: missing {missing}"
            )
        if total >= 1.0 - _SUM_EPS:
            raise ValueError(
                "data-efficient targets must sum to strictly less than 1 "
                f"(the remainder is the idle fraction), got {total:.6g}"
            )
        betas[0] = 1.0 - total
    else:
        if len(missing) > 1:
            raise ValueError(
                f"at most one experiment may be left implicit, missing {missing}"
            )
        if len(missing) == 1:
            betas[missing[0]] = 1.0 - total
        elif abs(total - 1.0) > _SUM_EPS:
            raise ValueError(
                f"observation rates sum to 1, so the targets must too; got {total:.6g}"
            )
    # A zero target blocks every level below it from ever opening.
    blocked = False
    for j in range(m - 1, 0, -1):
        if blocked and betas[j] > 0.0:
            raise ValueError(
                f"beta_{j} > 0 is unreachable below a zero target at a higher level"
            )
        if betas[j] == 0.0:
            blocked = True
    if target.data_efficient and betas[1] == 0.0:
        raise ValueError(
            "data-efficient targets need beta_1 > 0: the idle phase opens below level 1"
        )
    return betas


class _EvalBudget(Exception):
    pass


def calibrate(
    target: CalibrationTarget,
    models: Sequence[ExperimentModel],
    config: CalibrationConfig | None = None,
    base_seed: int | Sequence[int] = 0,
) -> CalibrationResult:
    """Find budgets (and, when needed, scales) meeting the rate targets.

    Runs one bisection per level from the top down using the renewal
    estimator with common random numbers across candidates, then re-evaluates
    the final parameters on a fresh, larger run. Non-convergence is reported
    through the converged flag and residuals, not an exception.
    """
    if config is None:
        config = CalibrationConfig()
    violation = validate_ordering(models)
    if violation is not None:
        raise ValueError(str(violation))
    m = len(models)
    de = target.data_efficient
    betas = _resolve_betas(target, m)
    threshold = set_threshold(target.gamma)
    scales = {i: config.initial_scale for i in range(2, m + 1)}
    budgets = {j: 0.0 for j in range(1, m)}
    if de:
        scales[1] = config.initial_scale
        budgets[0] = 0.0

    evaluations = 0
    search_seed = seed_entropy(base_seed) + (11,)
    final_seed = seed_entropy(base_seed) + (99,)

    def build(overrides: dict[int, float] | None = None) -> PolicyParams:
        merged = dict(budgets)
        if overrides:
            merged.update(overrides)
        return PolicyParams(
            m=m,
            A=threshold,
            scales=dict(scales),
            budgets=merged,
            mu=config.mu if de else None,
            data_efficient=de,
        )

    def ratio_at(j: int, candidate: float) -> float:
        nonlocal evaluations
        if evaluations >= config.max_evaluations:
            raise _EvalBudget()
        evaluations += 1
        por = estimate_por_renewal(build({j: candidate}), models, config.search_cycles, search_seed)
        return por[j].mean / por[m].mean

    beta_m = betas[m]
    lowest = 0 if de else 1
    ran_out = False
    try:
        for j in range(m - 1, lowest - 1, -1):
            want = betas[j] / beta_m
            if want == 0.0:
                budgets[j] = 0.0
                continue
            ratio_tol = 0.25 * config.tolerance / beta_m
            # make sure the target is reachable at all; escalate the scale
            # feeding this level until the saturated ratio clears the target
            while True:
                cap_ratio = ratio_at(j, config.budget_cap)
                if cap_ratio >= want:
                    break
                new_scale = scales[j + 1] * 10.0
                if new_scale > config.scale_cap:
                    budgets[j] = config.budget_cap
                    ran_out = True
                    break
                scales[j + 1] = new_scale
            if ran_out:
                break
            lo, hi = 0.0, config.budget_cap
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                r = ratio_at(j, mid)
                if abs(r - want) <= ratio_tol:
                    lo = hi = mid
                    break
                if r < want:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-4 * max(1.0, hi):
                    break
            budgets[j] = 0.5 * (lo + hi)
    except _EvalBudget:
        ran_out = True

    params = build()
    achieved = estimate_por_renewal(params, models, config.final_cycles, final_seed)
    residuals = {k: achieved[k].mean - betas[k] for k in achieved.components}
    converged = not ran_out and all(abs(r) <= config.tolerance for r in residuals.values())
    return CalibrationResult(params, achieved, residuals, evaluations, converged)
