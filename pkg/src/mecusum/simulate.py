"""Episode simulation: change-point scenarios driving the detection engine.

Observations for each experiment come from their own counter-based substream,
so trials are reproducible and order-independent: the stream for experiment i
in a run seeded s is Philox keyed by (s..., OBS_STREAM_TAG, i), and all coin
flips and budget resolutions draw from a separate control stream. Regime
switching (pre to post change) only remaps the buffered standard normals, so
it never perturbs stream alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .densities import GAUSSIAN, ExperimentModel, validate_ordering
from .engine import (
    IDLE,
    Action,
    PolicyParams,
    RssParams,
    _EngineCore,
    run_rss,
)

OBS_STREAM_TAG = 1
CONTROL_STREAM_TAG = 2

# Horizon used by config-driven flows when change_point is infinite and no
# horizon was given explicitly.
DEFAULT_INFINITE_HORIZON = 1_000_000

_BLOCK = 4096


def seed_entropy(seed: int | Sequence[int]) -> tuple[int, ...]:
    """Normalize a seed (int or tuple of ints) into SeedSequence entropy."""
    if isinstance(seed, (int, np.integer)):
        parts: tuple[int, ...] = (int(seed),)
    else:
        parts = tuple(int(s) for s in seed)
    if not parts:
        raise ValueError("seed must not be empty")
    for p in parts:
        if p < 0:
            raise ValueError(f"seed components must be non-negative, got {p}")
    return parts


def observation_generator(seed: int | Sequence[int], experiment_id: int) -> np.random.Generator:
    entropy = seed_entropy(seed) + (OBS_STREAM_TAG, experiment_id)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def control_generator(seed: int | Sequence[int]) -> np.random.Generator:
    entropy = seed_entropy(seed) + (CONTROL_STREAM_TAG,)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class _GaussianStream:
    """Buffered observation stream for one experiment.

    Draws standard normals in blocks and maps them through the pre- or
    post-change location/scale at consumption time.
    """

    __slots__ = ("gen", "buf", "pos", "pre_mean", "pre_std", "post_mean", "post_std")

    def __init__(self, model: ExperimentModel, gen: np.random.Generator) -> None:
        self.gen = gen
        # plain-float list: python float arithmetic beats numpy scalars here
        self.buf = gen.standard_normal(_BLOCK).tolist()
        self.pos = 0
        self.pre_mean = model.pre.mean
        self.pre_std = model.pre.std
        self.post_mean = model.post.mean
        self.post_std = model.post.std

    def next(self, post: bool) -> float:
        i = self.pos
        if i == _BLOCK:
            self.buf = self.gen.standard_normal(_BLOCK).tolist()
            i = 0
        z = self.buf[i]
        self.pos = i + 1
        if post:
            return self.post_mean + self.post_std * z
        return self.pre_mean + self.pre_std * z


class _GenericStream:
    """Per-draw fallback for density families without a location-scale form."""

    __slots__ = ("gen", "model")

    def __init__(self, model: ExperimentModel, gen: np.random.Generator) -> None:
        self.gen = gen
        self.model = model

    def next(self, post: bool) -> float:
        spec = self.model.post if post else self.model.pre
        return spec.sample(self.gen)


def _make_stream(model: ExperimentModel, gen: np.random.Generator):
    if model.pre.family == GAUSSIAN and model.post.family == GAUSSIAN:
        return _GaussianStream(model, gen)
    return _GenericStream(model, gen)


@dataclass(frozen=True)
class Scenario:
    """Experiment set plus the change point nu (integer >= 1, or math.inf for
    a run that never changes). horizon caps the episode length."""

    models: tuple[ExperimentModel, ...]
    change_point: float
    horizon: int | None = None

    def __post_init__(self) -> None:
        models = tuple(self.models)
        object.__setattr__(self, "models", models)
        violation = validate_ordering(models)
        if violation is not None:
            raise ValueError(str(violation))
        nu = self.change_point
        if math.isinf(nu) and nu > 0:
            object.__setattr__(self, "change_point", math.inf)
        elif float(nu).is_integer() and nu >= 1:
            object.__setattr__(self, "change_point", int(nu))
        else:
            raise ValueError(
                f"change_point must be an integer >= 1 or infinity, got {nu}"
            )
        if self.horizon is not None:
            if not float(self.horizon).is_integer() or self.horizon < 1:
                raise ValueError(f"horizon must be a positive integer, got {self.horizon}")
            object.__setattr__(self, "horizon", int(self.horizon))


@dataclass(frozen=True)
class TraceStep:
    n: int
    action: Action
    observation: float | None
    statistic: float
    level: int  # level at which the action was taken; experiment id for RSS
    event: str


@dataclass(frozen=True)
class EpisodeTrace:
    steps: tuple[TraceStep, ...]
    stopping_time: int | None  # None when the horizon cut the episode short
    stop_reason: str | None
    counts: dict[int, int]  # observations per experiment id; key 0 counts idle steps
    seed: int | tuple[int, ...]


@dataclass(frozen=True)
class EpisodeSummary:
    stopping_time: int | None
    stop_reason: str | None
    counts: dict[int, int]
    steps_run: int


def run_episode(
    params: PolicyParams | RssParams,
    scenario: Scenario,
    seed: int | Sequence[int],
) -> EpisodeTrace:
    """Simulate one episode and keep the full step-by-step trace."""
    steps, stopping_time, stop_reason, counts = _drive(params, scenario, seed, record=True)
    return EpisodeTrace(
        steps=tuple(steps),
        stopping_time=stopping_time,
        stop_reason=stop_reason,
        counts=counts,
        seed=seed if isinstance(seed, int) else tuple(seed),
    )


def episode_summary(
    params: PolicyParams | RssParams,
    scenario: Scenario,
    seed: int | Sequence[int],
) -> EpisodeSummary:
    """Simulate one episode, keeping only the stopping time and counts."""
    _, stopping_time, stop_reason, counts = _drive(params, scenario, seed, record=False)
    return EpisodeSummary(stopping_time, stop_reason, counts, sum(counts.values()))


def trace_figure(
    params: PolicyParams | RssParams,
    scenario: Scenario,
    seed: int | Sequence[int],
) -> list[tuple[int, float, int]]:
    """(n, statistic, level) triples for plotting a sample path."""
    trace = run_episode(params, scenario, seed)
    return [(s.n, s.statistic, s.level) for s in trace.steps]


def _drive(params, scenario, seed, record):
    nu = scenario.change_point
    horizon = scenario.horizon
    if math.isinf(nu) and horizon is None:
        raise ValueError("a horizon is required when change_point is infinite")
    by_id = sorted(scenario.models, key=lambda mdl: mdl.id)
    streams = {mdl.id: _make_stream(mdl, observation_generator(seed, mdl.id)) for mdl in by_id}
    ctrl = control_generator(seed)
    counts = {0: 0, **{mdl.id: 0 for mdl in by_id}}
    if isinstance(params, RssParams):
        result = run_rss(
            params,
            by_id,
            lambda exp, n: streams[exp].next(n >= nu),
            ctrl,
            max_steps=horizon,
            record=record,
        )
        for exp, c in result.counts.items():
            counts[exp] = c
        steps = []
        if record and result.steps is not None:
            steps = [
                TraceStep(n, Action("sample", exp), x, d, exp,
                          "stop" if result.stopping_time == n else "")
                for n, exp, x, d in result.steps
            ]
        reason = "threshold" if result.stopping_time is not None else None
        return steps, result.stopping_time, reason, counts
    if params.m != len(by_id):
        raise ValueError(
            f"policy has m={params.m} but the scenario provides {len(by_id)} models"
        )
    core = _EngineCore.fresh(params, by_id, ctrl)
    steps = [] if record else None
    n = 0
    while not core.stopped and (horizon is None or n < horizon):
        n += 1
        lvl = core.level
        if lvl == 0:
            event = core.advance_idle()
            counts[0] += 1
            if record:
                steps.append(TraceStep(n, IDLE, None, core.D, 0, event))
        else:
            x = streams[lvl].next(n >= nu)
            event = core.advance(x)
            counts[lvl] += 1
            if record:
                steps.append(TraceStep(n, Action("sample", lvl), x, core.D, lvl, event))
    stopping_time = core.time if core.stopped else None
    return steps if record else [], stopping_time, core.stop_reason, counts
