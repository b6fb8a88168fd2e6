"""Desk-scale layer-attention network.

Each layer applies a dense backbone ``x = tanh(W h + b)`` and then retrieves
from the key/value slots of itself and earlier layers:

* ``mrla_b`` -- softmax attention over every earlier slot,
* ``ela``    -- the same with pruned layers removed from the slot set and
  their own retrieval skipped,
* ``mrla_l`` -- the linear recurrence ``o_l = lam_l * o_{l-1} + (q_l . k_l) v_l``.

Layer outputs are ``h_l = x_l + o_l`` (``h_l = x_l`` for a pruned layer).
Inputs are batches of ``d``-dimensional feature vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .divergence import AttentionDistribution
from .exceptions import StructuralError
from .pruning import PruneMask

__all__ = [
    "AttentionMode",
    "LayerStack",
    "ForwardTrace",
    "project_qkv",
    "mrla_b_forward",
    "mrla_l_forward",
    "ela_forward",
    "forward",
    "backward",
    "PARAM_NAMES",
]

PARAM_NAMES = ("backbone_w", "backbone_b", "wq", "wk", "wv", "lam")


class AttentionMode(str, Enum):
    MRLA_B = "mrla_b"
    MRLA_L = "mrla_l"
    ELA = "ela"


@dataclass(eq=False)
class LayerStack:
    """Parameters and retrieval mask of an ``L``-layer attention stack.

    ``tied_queries`` maps a layer to an earlier layer whose query it reuses
    (1-based).  A tied layer attends over exactly the slots its source sees,
    so it retrieves the same mixture of values as the source.
    """

    backbone_w: np.ndarray
    backbone_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    lam: np.ndarray
    head_count: int = 1
    mode: AttentionMode = AttentionMode.ELA
    scale: float | None = None
    mask: PruneMask | None = None
    tied_queries: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = AttentionMode(self.mode)
        L, d, d2 = np.shape(self.backbone_w)
        if d != d2 or L < 1 or d < 1:
            raise StructuralError("backbone weights must have shape (L, d, d)")
        for name in ("wq", "wk", "wv"):
            if np.shape(getattr(self, name)) != (L, d, d):
                raise StructuralError(f"{name} must have shape {(L, d, d)}")
        if np.shape(self.backbone_b) != (L, d) or np.shape(self.lam) != (L, d):
            raise StructuralError(f"backbone_b and lam must have shape {(L, d)}")
        if self.head_count < 1 or d % self.head_count:
            raise StructuralError(f"head count {self.head_count} must divide feature dim {d}")
        if self.scale is None:
            self.scale = float(d // self.head_count)
        if self.scale <= 0:
            raise StructuralError("softmax scaling must be positive")
        for dst, src in self.tied_queries.items():
            if not (1 <= src < dst <= L):
                raise StructuralError(f"cannot tie layer {dst} to layer {src}")
        self.mask = self.mask if self.mask is not None else PruneMask.ones(L)
        self.version = 0

    def __setattr__(self, name, value):
        if name == "mask" and value is not None and hasattr(self, "version"):
            if len(value) != self.layer_count:
                raise StructuralError(f"mask has {len(value)} bits for {self.layer_count} layers")
            self.version += 1
        super().__setattr__(name, value)

    @classmethod
    def init(cls, layer_count, feature_dim, head_count=1, mode=AttentionMode.ELA, seed=0,
             scale=None, tied_queries=None):
        """Uniform(-1/sqrt(d), 1/sqrt(d)) weights, zero biases, ``lam`` all ones."""
        rng = np.random.default_rng(seed)
        L, d = int(layer_count), int(feature_dim)
        bound = 1.0 / math.sqrt(d)

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            backbone_w=u(L, d, d),
            backbone_b=np.zeros((L, d)),
            wq=u(L, d, d),
            wk=u(L, d, d),
            wv=u(L, d, d),
            lam=np.ones((L, d)),
            head_count=head_count,
            mode=mode,
            scale=scale,
            tied_queries=dict(tied_queries or {}),
        )

    @property
    def layer_count(self) -> int:
        return self.backbone_w.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.backbone_w.shape[1]

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.head_count

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def sgd_step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            getattr(self, name)[...] -= lr * g
        self.version += 1

    def touch(self) -> None:
        """Mark parameters as changed after an in-place edit."""
        self.version += 1


@dataclass(eq=False)
class ForwardTrace:
    """Everything a forward pass produced, plus the caches ``backward`` needs."""

    mode: AttentionMode
    version: int
    bits: tuple[int, ...]
    inputs: list          # h_{l-1}, the input to layer l's backbone
    features: list        # x_l, backbone outputs
    outputs: list         # h_l, layer outputs
    attention: list       # o_l, or None for a skipped retrieval
    queries: list
    keys: list
    values: list
    weights: list         # softmax weights (n, heads, slots) or MRLA-L coefficients
    slots: list           # 0-based slot indices each layer attended over
    query_source: list    # 0-based source layer for tied queries, else None
    head_count: int = 1
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.outputs[-1]

    def head_distributions(self, layer: int) -> list[AttentionDistribution]:
        """Per-head distributions of a retrieving layer (1-based), batch-averaged."""
        w = self.weights[layer - 1]
        if w is None:
            raise StructuralError(f"layer {layer} skipped its retrieval")
        out = []
        for h in range(w.shape[1]):
            full = np.zeros(layer)
            full[self.slots[layer - 1]] = w[:, h, :].mean(axis=0)
            out.append(AttentionDistribution(layer, full / full.sum(), head_index=h))
        return out

    def distributions(self) -> list[AttentionDistribution]:
        """Head- and batch-averaged distribution of every retrieving layer."""
        out = []
        for l, w in enumerate(self.weights, start=1):
            if w is None:
                continue
            full = np.zeros(l)
            full[self.slots[l - 1]] = w.mean(axis=(0, 1))
            out.append(AttentionDistribution(l, full / full.sum()))
        return out


def _batch(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise StructuralError(f"inputs must have trailing dimension {d}, got shape {X.shape}")
    return X


def project_qkv(stack: LayerStack, l: int, x):
    """Query, key and value of layer ``l`` (1-based), split into heads.

    Returns three arrays of shape ``(..., heads, d / heads)``.
    """
    if not 1 <= l <= stack.layer_count:
        raise StructuralError(f"layer {l} outside 1..{stack.layer_count}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != stack.feature_dim:
        raise StructuralError(f"feature vector must have length {stack.feature_dim}")
    shape = x.shape[:-1] + (stack.head_count, stack.head_dim)
    i = l - 1
    return (
        (x @ stack.wq[i].T).reshape(shape),
        (x @ stack.wk[i].T).reshape(shape),
        (x @ stack.wv[i].T).reshape(shape),
    )


def _softmax_forward(stack: LayerStack, X, bits, mode) -> ForwardTrace:
    L, d, H = stack.layer_count, stack.feature_dim, stack.head_count
    dh = d // H
    inv = 1.0 / math.sqrt(stack.scale)
    h = _batch(X, d)
    n = h.shape[0]
    ties = {dst - 1: src - 1 for dst, src in stack.tied_queries.items()}
    key_bank = np.empty((n, L, H, dh))
    val_bank = np.empty((n, L, H, dh))
    t = ForwardTrace(mode, stack.version, tuple(bits), [], [], [], [], [None] * L, [None] * L,
                     [None] * L, [None] * L, [None] * L, [None] * L, H)
    for l in range(L):
        t.inputs.append(h)
        x = np.tanh(h @ stack.backbone_w[l].T + stack.backbone_b[l])
        t.features.append(x)
        if not bits[l]:
            t.attention.append(None)
            t.outputs.append(x)
            h = x
            continue
        k = (x @ stack.wk[l].T).reshape(n, H, dh)
        v = (x @ stack.wv[l].T).reshape(n, H, dh)
        key_bank[:, l] = k
        val_bank[:, l] = v
        src = ties.get(l)
        if src is not None and bits[src]:
            q = t.queries[src]
            slots = t.slots[src]
            t.query_source[l] = src
        else:
            q = (x @ stack.wq[l].T).reshape(n, H, dh)
            slots = [i for i in range(l + 1) if bits[i]]
        K = key_bank[:, slots]
        V = val_bank[:, slots]
        scores = np.einsum("nhd,nshd->nhs", q, K) * inv
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        o = np.einsum("nhs,nshd->nhd", w, V).reshape(n, d)
        t.queries[l], t.keys[l], t.values[l] = q, k, v
        t.weights[l], t.slots[l] = w, slots
        t.attention.append(o)
        h = x + o
        t.outputs.append(h)
    t.extra["key_bank"] = key_bank
    t.extra["val_bank"] = val_bank
    return t


def mrla_b_forward(stack: LayerStack, X) -> ForwardTrace:
    """Softmax layer attention over all preceding layers (mask ignored)."""
    return _softmax_forward(stack, X, (1,) * stack.layer_count, AttentionMode.MRLA_B)


def ela_forward(stack: LayerStack, X) -> ForwardTrace:
    """Layer attention with pruned retrievals removed; see the module docstring."""
    return _softmax_forward(stack, X, stack.mask.bits, AttentionMode.ELA)


def mrla_l_forward(stack: LayerStack, X) -> ForwardTrace:
    """Linear recurrence form; no softmax, ``o_0 = 0``.

    Recorded weights are the recurrence expanded into per-slot coefficients
    ``|q_i . k_i| * mean|prod_{j>i} lam_j|`` per head, normalized over slots.
    """
    if any(b == 0 for b in stack.mask.bits):
        raise StructuralError("the linear recurrence does not support pruned layers")
    L, d, H = stack.layer_count, stack.feature_dim, stack.head_count
    dh = d // H
    inv = 1.0 / math.sqrt(stack.scale)
    h = _batch(X, d)
    n = h.shape[0]
    t = ForwardTrace(AttentionMode.MRLA_L, stack.version, (1,) * L, [], [], [], [], [None] * L,
                     [None] * L, [None] * L, [None] * L, [None] * L, [None] * L, H)
    o_prev = np.zeros((n, d))
    coefs = []    # per slot: |q_i . k_i| of shape (n, H)
    decay = np.zeros((0, d))  # per slot: prod of lam since that slot
    prev_out = []
    for l in range(L):
        t.inputs.append(h)
        x = np.tanh(h @ stack.backbone_w[l].T + stack.backbone_b[l])
        t.features.append(x)
        q, k, v = (
            (x @ w[l].T).reshape(n, H, dh) for w in (stack.wq, stack.wk, stack.wv)
        )
        c = np.einsum("nhd,nhd->nh", q, k) * inv
        o = stack.lam[l] * o_prev + (c[:, :, None] * v).reshape(n, d)
        prev_out.append(o_prev)
        t.queries[l], t.keys[l], t.values[l] = q, k, v
        t.attention.append(o)
        h = x + o
        t.outputs.append(h)

        decay = np.vstack([decay * stack.lam[l], np.ones((1, d))])
        coefs.append(np.abs(c))
        mag = np.abs(decay).reshape(l + 1, H, dh).mean(axis=-1)       # (slots, H)
        raw = np.stack(coefs, axis=-1) * mag.T[None, :, :]             # (n, H, slots)
        total = raw.sum(axis=-1, keepdims=True)
        w = np.where(total > 0, raw / np.where(total > 0, total, 1.0), 1.0 / (l + 1))
        t.weights[l] = w
        t.slots[l] = list(range(l + 1))
        t.extra.setdefault("coef", []).append(c)
        o_prev = o
    t.extra["prev_out"] = prev_out
    return t


def forward(stack: LayerStack, X) -> ForwardTrace:
    if stack.mode is AttentionMode.MRLA_B:
        return mrla_b_forward(stack, X)
    if stack.mode is AttentionMode.MRLA_L:
        return mrla_l_forward(stack, X)
    return ela_forward(stack, X)


def backward(stack: LayerStack, trace: ForwardTrace, upstream) -> dict[str, np.ndarray]:
    """Gradients of every stack parameter given dLoss/d(final layer output)."""
    if trace.version != stack.version:
        raise StructuralError("trace is stale: the stack changed after the forward pass")
    g = np.asarray(upstream, dtype=float)
    if g.shape != trace.final.shape:
        raise StructuralError(f"upstream gradient must have shape {trace.final.shape}")
    grads = {name: np.zeros_like(p) for name, p in stack.params().items()}
    if trace.mode is AttentionMode.MRLA_L:
        _backward_linear(stack, trace, g, grads)
    else:
        _backward_softmax(stack, trace, g, grads)
    return grads


def _backbone_backward(stack, trace, l, dx, grads):
    x = trace.features[l]
    dz = dx * (1.0 - x * x)
    grads["backbone_w"][l] = dz.T @ trace.inputs[l]
    grads["backbone_b"][l] = dz.sum(axis=0)
    return dz @ stack.backbone_w[l]


def _backward_softmax(stack, trace, dh, grads):
    L, d, H = stack.layer_count, stack.feature_dim, stack.head_count
    n = dh.shape[0]
    dhd = d // H
    inv = 1.0 / math.sqrt(stack.scale)
    dk = np.zeros((L, n, d))
    dv = np.zeros((L, n, d))
    pending = [None] * L
    key_bank, val_bank = trace.extra["key_bank"], trace.extra["val_bank"]
    for l in reversed(range(L)):
        x = trace.features[l]
        dx = dh.copy()
        if trace.bits[l]:
            w, slots, q = trace.weights[l], trace.slots[l], trace.queries[l]
            K, V = key_bank[:, slots], val_bank[:, slots]
            do = dh.reshape(n, H, dhd)
            dw = np.einsum("nhd,nshd->nhs", do, V)
            dV = np.einsum("nhs,nhd->nshd", w, do)
            ds = w * (dw - (w * dw).sum(axis=-1, keepdims=True))
            dq = np.einsum("nhs,nshd->nhd", ds, K).reshape(n, d) * inv
            dK = np.einsum("nhs,nhd->nshd", ds, q) * inv
            dk[slots] += dK.reshape(n, len(slots), d).transpose(1, 0, 2)
            dv[slots] += dV.reshape(n, len(slots), d).transpose(1, 0, 2)
            if pending[l] is not None:
                dq = dq + pending[l]
            src = trace.query_source[l]
            if src is not None:
                pending[src] = dq if pending[src] is None else pending[src] + dq
            else:
                grads["wq"][l] = dq.T @ x
                dx += dq @ stack.wq[l]
            grads["wk"][l] = dk[l].T @ x
            grads["wv"][l] = dv[l].T @ x
            dx += dk[l] @ stack.wk[l] + dv[l] @ stack.wv[l]
        dh = _backbone_backward(stack, trace, l, dx, grads)


def _backward_linear(stack, trace, dh, grads):
    L, d, H = stack.layer_count, stack.feature_dim, stack.head_count
    n = dh.shape[0]
    dhd = d // H
    inv = 1.0 / math.sqrt(stack.scale)
    do_carry = np.zeros((n, d))
    for l in reversed(range(L)):
        x = trace.features[l]
        q, k, v = trace.queries[l], trace.keys[l], trace.values[l]
        c = trace.extra["coef"][l]
        do = dh + do_carry
        grads["lam"][l] = (do * trace.extra["prev_out"][l]).sum(axis=0)
        doh = do.reshape(n, H, dhd)
        dc = np.einsum("nhd,nhd->nh", doh, v)
        dvv = (c[:, :, None] * doh).reshape(n, d)
        dq = (dc[:, :, None] * k).reshape(n, d) * inv
        dkk = (dc[:, :, None] * q).reshape(n, d) * inv
        grads["wq"][l] = dq.T @ x
        grads["wk"][l] = dkk.T @ x
        grads["wv"][l] = dvv.T @ x
        dx = dh + dq @ stack.wq[l] + dkk @ stack.wk[l] + dvv @ stack.wv[l]
        do_carry = stack.lam[l] * do
        dh = _backbone_backward(stack, trace, l, dx, grads)
