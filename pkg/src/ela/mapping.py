"""Score mappers that turn a divergence series into pruning scores in [0, 1].

The beta quantile mapper is the default; the other kinds exist for ablation
runs and share the same select/normalize pipeline where it applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .divergence import DivergenceSeries
from .exceptions import ConfigError, StructuralError
from .special import BetaParams, ExpParams, GammaParams, NormalParams, normal_cdf

__all__ = [
    "MapperKind",
    "MapperConfig",
    "MappedScores",
    "empirical_cdf",
    "quantile_map",
    "quantile_threshold",
    "ebqm",
    "gqm",
    "eqm",
    "normal_map",
    "softmax_map",
    "sigmoid_map",
    "raw_threshold_scores",
    "fixed_count_scores",
    "apply_mapper",
    "QuantileMapper",
    "DivergenceScorer",
]

DistParams = Union[BetaParams, GammaParams, ExpParams, NormalParams, None]


class MapperKind(str, Enum):
    EBQM = "ebqm"
    GQM = "gqm"
    EQM = "eqm"
    NORMAL = "normal"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    RAW = "raw"
    FIXED = "fixed"


# kinds that run the quantile-select / min-max / transform pipeline
QUANTILE_KINDS = frozenset(
    {MapperKind.EBQM, MapperKind.GQM, MapperKind.EQM, MapperKind.NORMAL, MapperKind.SOFTMAX, MapperKind.SIGMOID}
)

_DEFAULT_PARAMS = {
    MapperKind.EBQM: BetaParams(5.0, 1.0),
    MapperKind.GQM: GammaParams(1.0, 1.0),
    MapperKind.EQM: ExpParams(1.0),
    MapperKind.NORMAL: NormalParams(),
}
_PARAM_TYPES = {
    MapperKind.EBQM: BetaParams,
    MapperKind.GQM: GammaParams,
    MapperKind.EQM: ExpParams,
    MapperKind.NORMAL: NormalParams,
}


@dataclass(frozen=True)
class MapperConfig:
    kind: MapperKind = MapperKind.EBQM
    gamma_quantile: float = 0.5
    dist_params: DistParams = None
    fixed_k: int = 0

    def __post_init__(self):
        try:
            kind = MapperKind(self.kind)
        except ValueError:
            raise ConfigError(f"unknown mapper kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        if not (0.0 < self.gamma_quantile <= 1.0):
            raise ConfigError(f"gamma quantile must lie in (0, 1], got {self.gamma_quantile}")
        if self.fixed_k < 0:
            raise ConfigError("fixed_k must be non-negative")
        expected = _PARAM_TYPES.get(kind)
        if self.dist_params is None:
            object.__setattr__(self, "dist_params", _DEFAULT_PARAMS.get(kind))
        elif expected is None or not isinstance(self.dist_params, expected):
            raise ConfigError(
                f"{kind.value} mapper cannot use {type(self.dist_params).__name__}"
            )

    def as_dict(self) -> dict:
        p = self.dist_params
        out = {"kind": self.kind.value, "gamma": self.gamma_quantile, "fixed_k": self.fixed_k}
        if isinstance(p, (BetaParams, GammaParams)):
            out.update(alpha=p.alpha, beta=p.beta)
        elif isinstance(p, ExpParams):
            out.update(rate=p.rate)
        return out


@dataclass(frozen=True, eq=False)
class MappedScores:
    values: np.ndarray
    selected: tuple[int, ...]
    config: MapperConfig = field(default_factory=MapperConfig)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < 0.0) or np.any(v > 1.0) or not np.all(np.isfinite(v)):
            raise StructuralError("mapped scores must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "selected", tuple(sorted(int(i) for i in self.selected)))

    def __len__(self):
        return self.values.size


# -- empirical quantile mapping ---------------------------------------------------


def empirical_cdf(xs) -> np.ndarray:
    """p(x_i) = (1/n) * #{j : x_j <= x_i}."""
    x = np.asarray(xs, dtype=float).reshape(-1)
    if x.size == 0:
        raise StructuralError("empirical_cdf needs at least one value")
    return np.searchsorted(np.sort(x), x, side="right") / x.size


def _clamped_ppf(target, p):
    if not hasattr(target, "ppf"):
        raise ConfigError(f"unsupported target distribution {target!r}")
    return np.asarray(target.ppf(p), dtype=float)


def quantile_map(xs, target) -> np.ndarray:
    """Map each value through ``target.ppf`` of its empirical probability.

    Probabilities are clamped to ``n / (n + 1)`` so the largest value stays
    finite under unbounded targets.
    """
    p = empirical_cdf(xs)
    n = p.size
    return _clamped_ppf(target, np.minimum(p, n / (n + 1.0)))


# -- selection / normalization -------------------------------------------------


def _values(series) -> np.ndarray:
    if isinstance(series, DivergenceSeries):
        return series.values
    v = np.asarray(series, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise StructuralError("divergence values must be finite")
    return v


def quantile_threshold(values, gamma: float) -> float:
    """Nearest-rank gamma-quantile: smallest value whose empirical CDF is >= gamma."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise StructuralError("empty divergence series")
    if not (0.0 < gamma <= 1.0):
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    # tiny slack keeps gamma * n from rounding up across an integer
    rank = max(1, math.ceil(gamma * v.size - 1e-9))
    return float(v[rank - 1])


# spreads this small relative to the values are rounding noise, not signal
TIE_RTOL = 1e-9


def _degenerate(lo, hi) -> bool:
    return hi - lo <= TIE_RTOL * max(abs(lo), abs(hi))


def _minmax(values, lo, hi):
    if _degenerate(lo, hi):
        return np.full(values.shape, 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class _Fitted:
    q_gamma: float
    lo: float
    hi: float
    mean: float
    std: float


def _fit_stats(values: np.ndarray, cfg: MapperConfig) -> _Fitted:
    if values.size == 0:
        raise StructuralError("empty divergence series")
    if cfg.kind in QUANTILE_KINDS:
        q = quantile_threshold(values, cfg.gamma_quantile)
        sel = values[values <= q]
    else:
        q = float(values.max())
        sel = values
    return _Fitted(q, float(sel.min()), float(sel.max()), float(sel.mean()), float(sel.std()))


def _transform_selected(norm, raw, cfg: MapperConfig, fit: _Fitted) -> np.ndarray:
    kind = cfg.kind
    if kind in (MapperKind.EBQM, MapperKind.GQM, MapperKind.EQM):
        return np.asarray(cfg.dist_params.cdf(norm), dtype=float)
    if kind is MapperKind.NORMAL:
        z = np.zeros_like(raw) if _degenerate(fit.lo, fit.hi) else (raw - fit.mean) / fit.std
        return np.asarray(normal_cdf(z), dtype=float)
    if kind is MapperKind.SOFTMAX:
        top = 0.5 if _degenerate(fit.lo, fit.hi) else 1.0
        return np.exp(norm - top)
    if kind is MapperKind.SIGMOID:
        return 1.0 / (1.0 + np.exp(-norm))
    raise ConfigError(f"{kind.value} is not a quantile-pipeline mapper")


def _apply_stats(values, cfg: MapperConfig, fit: _Fitted, tau=None):
    kind = cfg.kind
    if kind in QUANTILE_KINDS:
        mask = values <= fit.q_gamma
        out = np.ones(values.size)
        norm = _minmax(values[mask], fit.lo, fit.hi)
        out[mask] = np.clip(_transform_selected(norm, values[mask], cfg, fit), 0.0, 1.0)
        return out, np.flatnonzero(mask)
    if kind is MapperKind.RAW:
        out = _minmax(values, fit.lo, fit.hi)
        selected = np.arange(values.size) if tau is None else np.flatnonzero(out < tau)
        return out, selected
    if kind is MapperKind.FIXED:
        k = cfg.fixed_k
        if k > values.size:
            raise ConfigError(f"fixed_k={k} exceeds the {values.size} available scores")
        # stable sort: ties go to the lower layer index
        order = np.argsort(values, kind="stable")[:k]
        out = np.ones(values.size)
        out[order] = 0.0
        return out, np.sort(order)
    raise ConfigError(f"unknown mapper kind {kind!r}")


def apply_mapper(series, cfg: MapperConfig, tau: float | None = None) -> MappedScores:
    """Score a divergence series with the mapper described by ``cfg``.

    ``tau`` only matters for the raw-threshold mapper, whose selected set is
    the indices whose normalized divergence falls below it.
    """
    values = _values(series)
    if values.size == 0:
        raise StructuralError("empty divergence series")
    fit = _fit_stats(values, cfg)
    out, selected = _apply_stats(values, cfg, fit, tau)
    return MappedScores(out, tuple(selected), cfg)


def _with_kind(cfg, kind):
    if cfg is None:
        return MapperConfig(kind)
    if cfg.kind is not kind:
        raise ConfigError(f"expected a {kind.value} config, got {cfg.kind.value}")
    return cfg


def ebqm(series, cfg: MapperConfig | None = None) -> MappedScores:
    """Beta quantile mapping.

    Values at or below the nearest-rank gamma-quantile are min-max normalized
    among themselves and pushed through the Beta CDF; every other index gets
    1.0.  A constant selected set normalizes to 0.5.
    """
    return apply_mapper(series, _with_kind(cfg, MapperKind.EBQM))


def gqm(series, cfg: MapperConfig | None = None) -> MappedScores:
    return apply_mapper(series, _with_kind(cfg, MapperKind.GQM))


def eqm(series, cfg: MapperConfig | None = None) -> MappedScores:
    return apply_mapper(series, _with_kind(cfg, MapperKind.EQM))


def normal_map(series, cfg: MapperConfig | None = None) -> MappedScores:
    """Standard normal CDF of the standardized selected divergences."""
    return apply_mapper(series, _with_kind(cfg, MapperKind.NORMAL))


def softmax_map(series, cfg: MapperConfig | None = None) -> MappedScores:
    """Softmax over the selected set, rescaled so its largest entry is 1."""
    return apply_mapper(series, _with_kind(cfg, MapperKind.SOFTMAX))


def sigmoid_map(series, cfg: MapperConfig | None = None) -> MappedScores:
    return apply_mapper(series, _with_kind(cfg, MapperKind.SIGMOID))


def raw_threshold_scores(series, tau: float | None = None) -> MappedScores:
    """Global min-max normalization with no distribution transform."""
    return apply_mapper(series, MapperConfig(MapperKind.RAW), tau)


def fixed_count_scores(series, k: int) -> MappedScores:
    """Score 0 for the ``k`` smallest divergences and 1 for the rest."""
    return apply_mapper(series, MapperConfig(MapperKind.FIXED, fixed_k=int(k)))


# -- estimator wrappers --------------------------------------------------------


def _column_values(X):
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise StructuralError("expected a 1-D series or a single-column 2-D array")
    if arr.size == 0:
        raise StructuralError("empty input")
    if not np.all(np.isfinite(arr)):
        raise StructuralError("input contains non-finite values")
    return arr


def _reshape_like(X, out):
    return out.reshape(-1, 1) if np.ndim(X) == 2 else out


def _make_params(kind, alpha, beta, rate):
    kind = MapperKind(kind)
    if kind is MapperKind.EBQM:
        return BetaParams(alpha, beta)
    if kind is MapperKind.GQM:
        return GammaParams(alpha, beta)
    if kind is MapperKind.EQM:
        return ExpParams(rate)
    if kind is MapperKind.NORMAL:
        return NormalParams()
    return None


class QuantileMapper(TransformerMixin, BaseEstimator):
    """Classic empirical quantile mapping onto a parametric target.

    ``fit`` stores the reference sample; ``transform`` maps values through
    the target inverse CDF at their empirical probability under that sample.

    Parameters
    ----------
    target : {"beta", "gamma", "exp", "normal"}
    alpha, beta : float
        Beta shapes, or Gamma shape and scale.
    rate : float
        Exponential rate.
    """

    def __init__(self, target="exp", alpha=1.0, beta=1.0, rate=1.0):
        self.target = target
        self.alpha = alpha
        self.beta = beta
        self.rate = rate

    def _target(self):
        targets = {
            "beta": lambda: BetaParams(self.alpha, self.beta),
            "gamma": lambda: GammaParams(self.alpha, self.beta),
            "exp": lambda: ExpParams(self.rate),
            "normal": NormalParams,
        }
        if self.target not in targets:
            raise ConfigError(f"unsupported target distribution {self.target!r}")
        return targets[self.target]()

    def fit(self, X, y=None):
        self.reference_ = np.sort(_column_values(X))
        self.target_ = self._target()
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        x = _column_values(X)
        n = self.reference_.size
        p = np.searchsorted(self.reference_, x, side="right") / n
        p = np.clip(p, 1.0 / (n + 1.0), n / (n + 1.0))
        return _reshape_like(X, _clamped_ppf(self.target_, p))


class DivergenceScorer(TransformerMixin, BaseEstimator):
    """Turns a divergence series into pruning scores.

    ``fit`` learns the gamma-quantile cut and the normalization range from a
    reference series; ``transform`` scores any series against them.  On the
    fitted series itself the result equals :func:`apply_mapper`.
    """

    def __init__(self, kind="ebqm", gamma=0.5, alpha=5.0, beta=1.0, rate=1.0, fixed_k=0, tau=None):
        self.kind = kind
        self.gamma = gamma
        self.alpha = alpha
        self.beta = beta
        self.rate = rate
        self.fixed_k = fixed_k
        self.tau = tau

    def _config(self):
        try:
            kind = MapperKind(self.kind)
        except ValueError:
            raise ConfigError(f"unknown mapper kind {self.kind!r}") from None
        return MapperConfig(kind, self.gamma, _make_params(kind, self.alpha, self.beta, self.rate), self.fixed_k)

    def fit(self, X, y=None):
        values = _column_values(X)
        self.config_ = self._config()
        self.stats_ = _fit_stats(values, self.config_)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        values = _column_values(X)
        out, selected = _apply_stats(values, self.config_, self.stats_, self.tau)
        self.selected_ = selected
        return _reshape_like(X, out)

    def score_series(self, series) -> MappedScores:
        """Fit on ``series`` and return the full :class:`MappedScores` record."""
        return apply_mapper(series, self._config(), self.tau)
