"""Iterative layer-freezing schedulers.

The distance-driven scheduler ranks layers by the normalized size of their
most recent parameter update and freezes the int(n * F) smallest every
iteration. Fresh distance entries start as large random values, which makes
the first iterations activate every layer once (warm start) before real
distances take over. Random and progressive baselines share the same
decision interface for ablation runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

INIT_LOW = 1.0e6    # warm-start init range; any real distance lies far below
INIT_HIGH = 2.0e6
EPS_DIV = 1.0e-12   # guards elementwise division by zero-valued parameters


@dataclass
class DistanceVector:
    """Per-layer update-distance state.

    Uninitialized entries hold their random init from [1e6, 2e6) and rank
    above every real distance, so they get scheduled active first. Frozen
    layers keep both their distance entry and their snapshot untouched.
    """

    d: np.ndarray
    initialized_mask: np.ndarray
    snapshot: dict = field(default_factory=dict)   # layer_id -> list of param arrays

    @property
    def n(self) -> int:
        return self.d.size


@dataclass(frozen=True)
class FreezeDecision:
    iteration: int
    frozen_ids: frozenset
    active_ids: frozenset

    @property
    def frozen_count(self) -> int:
        return len(self.frozen_ids)


def init_distances(n: int, seed: int) -> DistanceVector:
    """Distance vector seeded with large uniform values in [1e6, 2e6)."""
    if n < 1:
        raise ConfigError(f"need at least one layer, got n={n}")
    rng = np.random.default_rng(seed)
    d = rng.uniform(INIT_LOW, INIT_HIGH, size=n)
    return DistanceVector(d=d, initialized_mask=np.zeros(n, dtype=bool))


def frozen_count(n: int, freeze_rate: float) -> int:
    return int(n * freeze_rate)


def _check_rate(freeze_rate: float):
    if not 0.0 <= freeze_rate < 1.0:
        raise ConfigError(f"freeze rate must lie in [0, 1), got {freeze_rate}")


def select_frozen(dv: DistanceVector, freeze_rate: float, iteration: int = 0,
                  pinned_active=()) -> FreezeDecision:
    """Freeze the int(n*F) layers with the smallest distance values.

    Ties break toward the lower layer id (stable sort). Layers listed in
    pinned_active are exempt from freezing; the frozen count is unchanged
    and comes from the remaining layers.
    """
    _check_rate(freeze_rate)
    n = dv.n
    k = frozen_count(n, freeze_rate)
    d = dv.d
    if pinned_active:
        d = d.copy()
        d[list(pinned_active)] = np.inf
    order = np.argsort(d, kind="stable")
    frozen = frozenset(int(i) for i in order[:k])
    active = frozenset(range(n)) - frozen
    return FreezeDecision(iteration, frozen, active)


def layer_distance(params_before, params_after) -> float:
    """Mean |(W_after - W_before) / W_before| pooled over a layer's params.

    The division guard makes zero-valued entries contribute |delta| / eps
    only when they actually moved; an unchanged zero contributes zero.
    """
    total = 0.0
    count = 0
    for before, after in zip(params_before, params_after):
        b = np.asarray(before, dtype=np.float64)
        a = np.asarray(after, dtype=np.float64)
        total += float(np.sum(np.abs(a - b) / (np.abs(b) + EPS_DIV)))
        count += b.size
    return total / count if count else 0.0


def update_distances(dv: DistanceVector, params_before: dict, params_after: dict,
                     active_ids) -> DistanceVector:
    """Refresh distance entries for the active layers after an update step.

    params_before/params_after map layer_id -> list of parameter arrays.
    Frozen layers are untouched: their entries, masks, and snapshots keep
    their previous values.
    """
    for lid in active_ids:
        dv.d[lid] = layer_distance(params_before[lid], params_after[lid])
        dv.initialized_mask[lid] = True
        dv.snapshot[lid] = [np.array(p, copy=True) for p in params_after[lid]]
    return dv


def baseline_random(n: int, freeze_rate: float, seed: int, iteration: int) -> FreezeDecision:
    """Uniformly random frozen subset, drawn from a per-iteration stream."""
    _check_rate(freeze_rate)
    k = frozen_count(n, freeze_rate)
    rng = np.random.default_rng([seed, iteration])
    frozen = frozenset(int(i) for i in rng.choice(n, size=k, replace=False))
    return FreezeDecision(iteration, frozen, frozenset(range(n)) - frozen)


def baseline_progressive(n: int, freeze_rate: float, iteration: int,
                         total_iterations: int) -> FreezeDecision:
    """Constant prefix freeze: the first int(n*F) layers stay frozen throughout.

    Keeping the prefix fixed (rather than growing it) makes accuracy-vs-rate
    sweeps comparable across schedulers at the same F.
    """
    _check_rate(freeze_rate)
    k = frozen_count(n, freeze_rate)
    frozen = frozenset(range(k))
    return FreezeDecision(iteration, frozen, frozenset(range(n)) - frozen)


class Scheduler:
    """Decision source shared by the training loop.

    kind is one of "ils", "random", "progressive", "none". The trainer owns
    the DistanceVector (it also logs distances for the baselines); only the
    ils kind consults it for decisions.
    """

    def __init__(self, kind: str, n: int, freeze_rate: float, seed: int,
                 total_iterations: int = 0, pinned_active=()):
        if kind not in ("ils", "random", "progressive", "none"):
            raise ConfigError(f"unknown scheduler kind {kind!r}")
        _check_rate(freeze_rate)
        self.kind = kind
        self.n = n
        self.freeze_rate = freeze_rate
        self.seed = seed
        self.total_iterations = total_iterations
        self.pinned_active = tuple(pinned_active)

    def decide(self, dv: DistanceVector, iteration: int) -> FreezeDecision:
        if self.kind == "ils":
            return select_frozen(dv, self.freeze_rate, iteration, self.pinned_active)
        if self.kind == "random":
            return baseline_random(self.n, self.freeze_rate, self.seed, iteration)
        if self.kind == "progressive":
            return baseline_progressive(self.n, self.freeze_rate, iteration,
                                        self.total_iterations)
        return FreezeDecision(iteration, frozenset(), frozenset(range(self.n)))
