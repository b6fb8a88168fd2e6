"""Synthetic attention traces with planted redundant layers."""

from __future__ import annotations

import numpy as np

from .traceio import TraceRecord

__all__ = ["simulate_trace"]


def simulate_trace(layer_count, epochs, *, heads=1, redundant=(), seed=0, concentration=1.0,
                   jitter=0.05, self_weight=1e-4) -> list[TraceRecord]:
    """Per-epoch, per-layer, per-head weights for a stack of ``layer_count`` layers.

    Each layer gets a Dirichlet base distribution.  A layer listed in
    ``redundant`` copies its predecessor's distribution and keeps only
    ``self_weight`` on its own slot.  Every epoch and head perturbs the base
    multiplicatively by ``exp(jitter * N(0, 1))``.
    """
    rng = np.random.default_rng(seed)
    redundant = set(redundant)
    bases = []
    for l in range(1, layer_count + 1):
        if l in redundant and l > 1:
            b = np.append(bases[-1] * (1.0 - self_weight), self_weight)
        else:
            b = rng.dirichlet(np.full(l, concentration))
        bases.append(b)
    records = []
    for epoch in range(1, epochs + 1):
        for l, base in enumerate(bases, start=1):
            for h in range(heads):
                w = base * np.exp(jitter * rng.normal(size=l))
                w = w / w.sum()
                records.append(TraceRecord(epoch, l, h, tuple(float(x) for x in w)))
    return records
