"""Retrieval masks, staged pruning schedules and attention cost accounting."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .divergence import (
    DEFAULT_EPSILON,
    AttentionDistribution,
    DivergenceSeries,
    average_heads,
    average_series,
    series_from_stack,
)
from .exceptions import ConfigError, IngestionError, StructuralError, ValidationError
from .mapping import MappedScores, MapperConfig, MapperKind, apply_mapper
from .special import BetaParams

__all__ = [
    "PruneMask",
    "Stage",
    "StageSchedule",
    "StageResult",
    "AttentionTrace",
    "mask_from_scores",
    "mask_for_active",
    "merge_masks",
    "run_stage",
    "run_schedule",
    "flop_estimate",
    "preset_schedule",
    "PRESETS",
    "RedundancyPruner",
]


@dataclass(frozen=True)
class PruneMask:
    bits: tuple[int, ...]
    stage_id: int = 0
    threshold_used: float = float("nan")

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise StructuralError("mask must cover at least one layer")
        if any(b not in (0, 1) for b in bits):
            raise StructuralError("mask bits must be 0 or 1")
        if bits[0] != 1:
            raise StructuralError("the first layer's retrieval can never be pruned")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def ones(cls, layer_count: int) -> "PruneMask":
        return cls((1,) * layer_count)

    def __len__(self):
        return len(self.bits)

    @property
    def active_layers(self) -> tuple[int, ...]:
        return tuple(i + 1 for i, b in enumerate(self.bits) if b)

    @property
    def pruned_count(self) -> int:
        return len(self.bits) - sum(self.bits)


def _check_tau(tau):
    if not (0.0 < tau < 1.0):
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")


def mask_for_active(scores, tau: float, active_layers: Sequence[int], layer_count: int,
                    stage_id: int = 0) -> PruneMask:
    """Mask where score ``k`` gates the ``k+1``-th active layer (ties keep)."""
    _check_tau(tau)
    values = scores.values if isinstance(scores, MappedScores) else np.asarray(scores, float)
    if len(values) != len(active_layers) - 1:
        raise StructuralError(
            f"{len(values)} scores do not match {len(active_layers)} active layers"
        )
    bits = [1] * layer_count
    for score, layer in zip(values, active_layers[1:]):
        bits[layer - 1] = 1 if score >= tau else 0
    return PruneMask(tuple(bits), stage_id, tau)


def mask_from_scores(scores, tau: float, layer_count: int, stage_id: int = 0) -> PruneMask:
    """m_1 = 1 and m_{l+1} = 1 iff score_l >= tau."""
    n = len(scores.values) if isinstance(scores, MappedScores) else len(scores)
    if n != layer_count - 1:
        raise StructuralError(f"expected {layer_count - 1} scores, got {n}")
    return mask_for_active(scores, tau, range(1, layer_count + 1), layer_count, stage_id)


def merge_masks(prev: PruneMask, new: PruneMask) -> PruneMask:
    if len(prev) != len(new):
        raise StructuralError(f"mask lengths differ: {len(prev)} vs {len(new)}")
    if new.stage_id <= prev.stage_id:
        raise StructuralError("the new mask must come from a later stage")
    bits = tuple(a & b for a, b in zip(prev.bits, new.bits))
    return PruneMask(bits, new.stage_id, new.threshold_used)


# -- schedule ------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    stage_id: int
    epoch_window: tuple[int, int]
    mapper: MapperConfig = field(default_factory=MapperConfig)
    tau: float = 0.3

    def __post_init__(self):
        lo, hi = (int(e) for e in self.epoch_window)
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad epoch window {self.epoch_window}")
        object.__setattr__(self, "epoch_window", (lo, hi))
        _check_tau(self.tau)

    @property
    def epochs(self) -> range:
        return range(self.epoch_window[0], self.epoch_window[1] + 1)


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[Stage, ...] = ()

    def __post_init__(self):
        stages = tuple(self.stages)
        for a, b in zip(stages, stages[1:]):
            if b.epoch_window[0] <= a.epoch_window[1]:
                raise ConfigError("stage epoch windows must be disjoint and increasing")
            if b.stage_id <= a.stage_id:
                raise ConfigError("stage ids must increase")
        if stages and stages[0].stage_id < 1:
            raise ConfigError("stage ids start at 1")
        object.__setattr__(self, "stages", stages)

    def __iter__(self):
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)

    @classmethod
    def from_windows(cls, windows, mapper: MapperConfig | None = None, tau: float = 0.3):
        mapper = mapper or MapperConfig()
        return cls(tuple(Stage(i + 1, w, mapper, tau) for i, w in enumerate(windows)))


PRESETS = {
    # epochs, windows, alpha, beta, tau
    "cifar": dict(epochs=180, windows=((1, 3), (45, 48), (91, 93)), alpha=5.0, beta=1.0, tau=0.3),
    "imagenet": dict(epochs=100, windows=((1, 3), (51, 53)), alpha=2.0, beta=5.0, tau=0.25),
    "detection": dict(epochs=12, windows=((1, 1), (7, 7)), alpha=2.0, beta=5.0, tau=0.2),
}


def preset_schedule(name: str, gamma: float = 0.5) -> StageSchedule:
    try:
        p = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    mapper = MapperConfig(MapperKind.EBQM, gamma, BetaParams(p["alpha"], p["beta"]))
    return StageSchedule.from_windows(p["windows"], mapper, p["tau"])


# -- trace sources -------------------------------------------------------------


class AttentionTrace:
    """Per-epoch, per-layer, per-head attention distributions.

    Serves both as the in-memory buffer a trainer appends to and as the
    view over a recorded trace file.
    """

    def __init__(self, records: Iterable = ()):
        self._data: dict[int, dict[int, dict[int, AttentionDistribution]]] = defaultdict(
            lambda: defaultdict(dict)
        )
        for rec in records:
            self.add(rec.epoch, AttentionDistribution(rec.layer_index, rec.weights, rec.head_index))

    def add(self, epoch: int, dist: AttentionDistribution) -> None:
        heads = self._data[int(epoch)][dist.layer_index]
        if dist.head_index in heads:
            raise ValidationError(
                f"duplicate entry for epoch {epoch}, layer {dist.layer_index}, head {dist.head_index}"
            )
        heads[dist.head_index] = dist

    def epochs(self) -> list[int]:
        return sorted(self._data)

    def has_epoch(self, epoch: int) -> bool:
        return epoch in self._data

    def layer_count(self) -> int:
        return max((max(layers) for layers in self._data.values() if layers), default=0)

    def items(self):
        """``(epoch, distribution)`` pairs in epoch, layer, head order."""
        for epoch in sorted(self._data):
            for layer in sorted(self._data[epoch]):
                heads = self._data[epoch][layer]
                for h in sorted(heads):
                    yield epoch, heads[h]

    def distributions(self, epoch: int) -> dict[int, AttentionDistribution]:
        """Head-averaged distribution per layer recorded at ``epoch``."""
        layers = self._data.get(epoch, {})
        return {
            l: average_heads([heads[h] for h in sorted(heads)]) if len(heads) > 1 else heads[min(heads)]
            for l, heads in sorted(layers.items())
        }


@dataclass(frozen=True)
class StageResult:
    stage_id: int
    series: DivergenceSeries
    scores: MappedScores
    mask: PruneMask


def _epoch_series(source: AttentionTrace, epoch, active, epsilon, stage_id):
    ds = source.distributions(epoch)
    missing = [l for l in active if l not in ds]
    if missing:
        raise IngestionError(f"epoch {epoch} has no attention weights for layers {missing}")
    return series_from_stack([ds[l] for l in active], epsilon, epoch_window=(epoch, epoch), stage_id=stage_id)


def run_stage(stage: Stage, source: AttentionTrace, mask: PruneMask,
              epsilon: float = DEFAULT_EPSILON) -> StageResult:
    """Average divergences over the stage window, score them, and AND the new mask in."""
    missing = [e for e in stage.epochs if not source.has_epoch(e)]
    if missing:
        raise IngestionError(f"stage {stage.stage_id} is missing trace epochs {missing}")
    active = mask.active_layers
    if len(active) < 2:
        series = DivergenceSeries(np.zeros(0), stage.epoch_window, stage.stage_id, active)
        scores = MappedScores(np.zeros(0), (), stage.mapper)
        keep = PruneMask(mask.bits, stage.stage_id, stage.tau)
        return StageResult(stage.stage_id, series, scores, keep)
    per_epoch = [_epoch_series(source, e, active, epsilon, stage.stage_id) for e in stage.epochs]
    series = average_series(per_epoch)
    scores = apply_mapper(series, stage.mapper, stage.tau)
    new = mask_for_active(scores, stage.tau, active, len(mask), stage.stage_id)
    return StageResult(stage.stage_id, series, scores, merge_masks(mask, new))


def run_schedule(stack, schedule: StageSchedule, source: AttentionTrace,
                 epsilon: float = DEFAULT_EPSILON) -> list[StageResult]:
    """Run every stage in order.

    ``stack`` is either a layer count or an object with ``layer_count`` and
    a mutable ``mask``; in the latter case its mask is updated in place.
    """
    if isinstance(stack, int):
        mask, target = PruneMask.ones(stack), None
    else:
        mask, target = stack.mask, stack
    audit = []
    for stage in schedule:
        result = run_stage(stage, source, mask, epsilon)
        mask = result.mask
        audit.append(result)
        if target is not None:
            target.mask = mask
    return audit


# -- cost accounting -----------------------------------------------------------


def flop_estimate(geometry, mask: PruneMask | None = None) -> tuple[int, int]:
    """Multiply-add counts ``(attention, total)`` for one token through the stack.

    Each retrieving layer pays ``3 d^2`` for its query/key/value projections
    and ``2 d n`` for scores and the weighted sum over its ``n`` visible
    slots.  Pruned layers pay nothing and vanish from later slot counts.
    The backbone adds ``d^2 + d`` per layer regardless of the mask.
    """
    L, d = _geometry(geometry)
    bits = (1,) * L if mask is None else mask.bits
    if len(bits) != L:
        raise StructuralError(f"mask has {len(bits)} bits for {L} layers")
    attention = 0
    visible = 0
    for b in bits:
        if b:
            visible += 1
            attention += 3 * d * d + 2 * d * visible
    total = attention + L * (d * d + d)
    return attention, total


def _geometry(geometry):
    if isinstance(geometry, tuple):
        L, d = geometry[:2]
    elif isinstance(geometry, dict):
        L, d = geometry["layer_count"], geometry["feature_dim"]
    else:
        L, d = geometry.layer_count, geometry.feature_dim
    return int(L), int(d)


class RedundancyPruner(BaseEstimator):
    """Derives a retrieval mask from an attention trace.

    Parameters mirror the run configuration: mapper kind and its shape
    parameters, the threshold ``tau`` and the epoch windows to average over.
    """

    def __init__(self, kind="ebqm", gamma=0.5, alpha=5.0, beta=1.0, rate=1.0, fixed_k=0,
                 tau=0.3, epsilon=DEFAULT_EPSILON, windows=((1, 3),)):
        self.kind = kind
        self.gamma = gamma
        self.alpha = alpha
        self.beta = beta
        self.rate = rate
        self.fixed_k = fixed_k
        self.tau = tau
        self.epsilon = epsilon
        self.windows = windows

    def _schedule(self):
        from .mapping import DivergenceScorer

        mapper = DivergenceScorer(
            self.kind, self.gamma, self.alpha, self.beta, self.rate, self.fixed_k
        )._config()
        return StageSchedule.from_windows(self.windows, mapper, self.tau)

    def fit(self, X, y=None, layer_count=None):
        trace = X if isinstance(X, AttentionTrace) else AttentionTrace(X)
        L = layer_count or trace.layer_count()
        self.audit_ = run_schedule(L, self._schedule(), trace, self.epsilon)
        self.mask_ = self.audit_[-1].mask if self.audit_ else PruneMask.ones(L)
        return self
