"""Adjacent-layer KL divergences over layer-attention weight distributions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DomainError, StructuralError, ValidationError

__all__ = [
    "AttentionDistribution",
    "DivergenceSeries",
    "DEFAULT_EPSILON",
    "PROB_FLOOR",
    "kl_divergence",
    "padded_adjacent_kl",
    "average_heads",
    "restrict_to_slots",
    "series_from_stack",
    "average_series",
]

DEFAULT_EPSILON = 1e-10
PROB_FLOOR = 1e-12
SUM_TOL = 1e-6


def _as_prob_vector(p, name="p"):
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise StructuralError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValidationError(f"{name} must contain finite non-negative weights")
    if abs(arr.sum() - 1.0) > SUM_TOL:
        raise ValidationError(f"{name} sums to {arr.sum():.9g}, not 1")
    return arr


@dataclass(frozen=True, eq=False)
class AttentionDistribution:
    """Attention weights of one layer over value slots ``1..layer_index``.

    Slots of pruned layers carry weight 0.
    """

    layer_index: int
    weights: np.ndarray
    head_index: int = 0

    def __post_init__(self):
        if int(self.layer_index) < 1:
            raise StructuralError("layer_index is 1-based and must be >= 1")
        w = _as_prob_vector(self.weights, f"weights of layer {self.layer_index}")
        if w.size != self.layer_index:
            raise StructuralError(
                f"layer {self.layer_index} needs {self.layer_index} weights, got {w.size}"
            )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __eq__(self, other):
        if not isinstance(other, AttentionDistribution):
            return NotImplemented
        return (
            self.layer_index == other.layer_index
            and self.head_index == other.head_index
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True, eq=False)
class DivergenceSeries:
    values: np.ndarray
    epoch_window: tuple[int, int] = (0, 0)
    stage_id: int = 0
    active_layers: tuple[int, ...] = field(default=())

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("divergence values must be finite and non-negative")
        active = tuple(int(i) for i in self.active_layers) or tuple(range(1, v.size + 2))
        if len(active) != v.size + 1:
            raise StructuralError(
                f"{v.size} divergences need {v.size + 1} active layers, got {len(active)}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "active_layers", active)
        object.__setattr__(self, "epoch_window", tuple(int(e) for e in self.epoch_window))

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, DivergenceSeries):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and self.epoch_window == other.epoch_window
            and self.stage_id == other.stage_id
            and self.active_layers == other.active_layers
        )


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; ``inf`` when q has a zero where p does not."""
    p = _as_prob_vector(p, "p")
    q = _as_prob_vector(q, "q")
    if p.size != q.size:
        raise StructuralError(f"length mismatch: {p.size} vs {q.size}")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def _weights(d):
    return d.weights if isinstance(d, AttentionDistribution) else _as_prob_vector(d)


def padded_adjacent_kl(p_l, p_next, epsilon: float = DEFAULT_EPSILON) -> float:
    """KL between layer ``l`` and layer ``l+1`` after padding ``p_l`` with ``epsilon``.

    The first ``l`` entries of ``p_l`` are used as-is; the padded entry only
    contributes ``epsilon * log(epsilon / p_next[-1])``.
    """
    if not (0.0 < epsilon <= 1e-6):
        raise DomainError(f"epsilon must lie in (0, 1e-6], got {epsilon!r}")
    if isinstance(p_l, AttentionDistribution) and isinstance(p_next, AttentionDistribution):
        if p_next.layer_index != p_l.layer_index + 1:
            raise StructuralError(
                f"layers {p_l.layer_index} and {p_next.layer_index} are not adjacent"
            )
    p = _weights(p_l)
    q = _weights(p_next)
    if q.size != p.size + 1:
        raise StructuralError(
            f"next distribution must have exactly one more slot ({p.size} vs {q.size})"
        )
    head = q[:-1]
    support = p > 0
    if np.any(head[support] == 0) or q[-1] == 0:
        return math.inf
    body = float(np.sum(p[support] * np.log(p[support] / head[support])))
    return body + epsilon * math.log(epsilon / q[-1])


def average_heads(distros: Sequence[AttentionDistribution]) -> AttentionDistribution:
    """Head-averaged distribution for one layer."""
    if not distros:
        raise StructuralError("no heads to average")
    layer = distros[0].layer_index
    if any(d.layer_index != layer for d in distros):
        raise StructuralError("heads belong to different layers")
    w = np.mean([d.weights for d in distros], axis=0)
    return AttentionDistribution(layer, w / w.sum(), head_index=0)


def _floor_renormalize(w):
    if np.all(w >= PROB_FLOOR):
        return w
    w = np.maximum(w, PROB_FLOOR)
    return w / w.sum()


def restrict_to_slots(weights, slots: Sequence[int]) -> np.ndarray:
    """Keep the 1-based ``slots`` of ``weights``, renormalizing only if mass was dropped."""
    w = np.asarray(weights, dtype=float)
    idx = np.asarray(slots, dtype=int) - 1
    if idx.size == w.size and np.array_equal(idx, np.arange(w.size)):
        return w
    kept = w[idx]
    total = kept.sum()
    if total <= 0:
        return np.full(idx.size, 1.0 / idx.size)
    if total == w.sum():
        return kept
    return kept / total


def series_from_stack(
    distros: Sequence[AttentionDistribution],
    epsilon: float = DEFAULT_EPSILON,
    *,
    epoch_window: tuple[int, int] = (0, 0),
    stage_id: int = 0,
) -> DivergenceSeries:
    """Padded KL between each pair of consecutive active layers.

    ``distros`` holds one (head-averaged) distribution per active layer, in
    layer order.  When active layers are not consecutive, each layer is
    restricted to the active slots it can see, so the later layer always has
    exactly one more slot than the earlier one.
    """
    if len(distros) < 2:
        raise StructuralError("need at least two layer distributions")
    layers = [d.layer_index for d in distros]
    if any(b <= a for a, b in zip(layers, layers[1:])):
        raise StructuralError(f"distributions are not in increasing layer order: {layers}")
    values = []
    for k in range(len(distros) - 1):
        earlier = layers[: k + 1]
        later = layers[: k + 2]
        p = _floor_renormalize(restrict_to_slots(distros[k].weights, earlier))
        q = _floor_renormalize(restrict_to_slots(distros[k + 1].weights, later))
        values.append(padded_adjacent_kl(p, q, epsilon))
    return DivergenceSeries(
        np.array(values), epoch_window=epoch_window, stage_id=stage_id, active_layers=tuple(layers)
    )


def average_series(series_list: Sequence[DivergenceSeries]) -> DivergenceSeries:
    """Elementwise mean of per-epoch series taken over the same active layers."""
    if not series_list:
        raise StructuralError("no series to average")
    first = series_list[0]
    for s in series_list[1:]:
        if len(s) != len(first) or s.active_layers != first.active_layers:
            raise StructuralError("series cover different active layers")
        if s.stage_id != first.stage_id:
            raise StructuralError("series belong to different stages")
    if len(series_list) == 1:
        return first
    values = np.mean(np.stack([s.values for s in series_list]), axis=0)
    lo = min(s.epoch_window[0] for s in series_list)
    hi = max(s.epoch_window[1] for s in series_list)
    return DivergenceSeries(values, (lo, hi), first.stage_id, first.active_layers)
