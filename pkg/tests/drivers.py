"""Helpers that drive the engine one public step at a time.

Used by the reduction-identity and oracle-comparison tests, which need full
control over the observation streams instead of the packaged seeding.
"""

from __future__ import annotations

import numpy as np

from mecusum import init, next_action, step


def normal_stream(seed, mean=0.8, std=1.0, size=20_000):
    """Zero-argument callable yielding one Gaussian draw per call."""
    values = iter(np.random.default_rng(seed).normal(mean, std, size).tolist())
    return lambda: next(values)


def engine_records(params, models, supply, rng=None, max_steps=10_000_000):
    """One episode recorded in the straight-line conventions.

    supply maps an experiment id to a zero-argument callable producing the
    next observation; idle steps record source 0 and observation None.
    Returns (records, stopping_time, reason) with records of
    (n, source, observation, statistic).
    """
    state = init(params, rng)
    records = []
    if state.stopped:
        return records, 0, state.stop_reason
    while state.time < max_steps:
        action = next_action(state)
        if action.kind == "idle":
            source, obs = 0, None
        else:
            source = action.experiment
            obs = supply[source]()
        state = step(state, params, models, obs, rng).state
        records.append((state.time, source, obs, state.statistic))
        if state.stopped:
            return records, state.time, state.stop_reason
    return records, None, "max-steps"


def engine_decisions(params, models, key_of, pools, rng=None, max_steps=10_000):
    """One episode against shared per-key observation lists.

    key_of maps an experiment id (0 for idle) to a pool key; two engines run
    with the same pools consume identical observations whenever they take
    identical decisions. Returns ([(key, statistic)], stopping_time, reason).
    """
    state = init(params, rng)
    cursors = dict.fromkeys(pools, 0)
    records = []
    if state.stopped:
        return records, 0, state.stop_reason
    while state.time < max_steps:
        action = next_action(state)
        if action.kind == "idle":
            key, obs = key_of[0], None
        else:
            key = key_of[action.experiment]
            obs = pools[key][cursors[key]]
            cursors[key] += 1
        state = step(state, params, models, obs, rng).state
        records.append((key, state.statistic))
        if state.stopped:
            return records, state.time, state.stop_reason
    return records, None, "max-steps"
