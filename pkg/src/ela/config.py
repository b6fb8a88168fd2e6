"""Run configuration and schedule files (JSON)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .divergence import DEFAULT_EPSILON
from .exceptions import ConfigError, ReportIOError
from .mapping import MapperConfig, MapperKind
from .pruning import PRESETS, Stage, StageSchedule
from .special import BetaParams, ExpParams, GammaParams

__all__ = ["RunConfig", "load_config", "load_schedule", "schedule_from_dict", "schedule_to_dict",
           "mapper_from_dict", "MODES"]

MODES = ("analyze", "simulate", "train", "report")


def mapper_from_dict(d: dict) -> MapperConfig:
    d = dict(d)
    try:
        kind = MapperKind(d.get("kind", "ebqm"))
    except ValueError:
        raise ConfigError(f"unknown mapper kind {d.get('kind')!r}") from None
    alpha = float(d.get("alpha", 5.0 if kind is MapperKind.EBQM else 1.0))
    beta = float(d.get("beta", 1.0))
    params = {
        MapperKind.EBQM: lambda: BetaParams(alpha, beta),
        MapperKind.GQM: lambda: GammaParams(alpha, beta),
        MapperKind.EQM: lambda: ExpParams(float(d.get("rate", 1.0))),
    }.get(kind, lambda: None)()
    return MapperConfig(kind, float(d.get("gamma", 0.5)), params, int(d.get("fixed_k", 0)))


def schedule_from_dict(d: dict, mapper: MapperConfig, tau: float) -> StageSchedule:
    if "stages" in d:
        stages = []
        for i, s in enumerate(d["stages"], start=1):
            m = mapper_from_dict(s["mapper"]) if "mapper" in s else mapper
            stages.append(Stage(int(s.get("stage_id", i)), tuple(s["epoch_window"]), m,
                                float(s.get("tau", tau))))
        return StageSchedule(tuple(stages))
    if "windows" in d:
        return StageSchedule.from_windows([tuple(w) for w in d["windows"]], mapper, tau)
    raise ConfigError("schedule needs either 'stages' or 'windows'")


def schedule_to_dict(schedule: StageSchedule) -> dict:
    return {"stages": [
        {"stage_id": s.stage_id, "epoch_window": list(s.epoch_window), "tau": s.tau,
         "mapper": s.mapper.as_dict()}
        for s in schedule
    ]}


def _read_json(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def load_schedule(path, mapper: MapperConfig, tau: float) -> StageSchedule:
    return schedule_from_dict(_read_json(path), mapper, tau)


@dataclass(frozen=True)
class RunConfig:
    mode: str = "analyze"
    mapper: MapperConfig = field(default_factory=MapperConfig)
    tau: float = 0.3
    epsilon: float = DEFAULT_EPSILON
    windows: tuple[tuple[int, int], ...] = ((1, 3), (45, 48), (91, 93))
    stages: dict | None = None   # explicit schedule document, overrides windows
    epochs: int = 180
    layers: int = 6
    dim: int = 8
    heads: int = 1
    tied_queries: tuple[tuple[int, int], ...] = ()
    n_classes: int = 3
    n_samples: int = 600
    noise: float = 0.4
    test_fraction: float = 1 / 3
    lr: float = 0.3
    batch_size: int = 32
    redundant: tuple[int, ...] = ()
    trace: str | None = None
    out: str = "ela-out"
    seed: int = 0
    plots: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 < self.tau < 1.0):
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not (0.0 < self.epsilon <= 1e-6):
            raise ConfigError(f"epsilon must lie in (0, 1e-6], got {self.epsilon}")
        if self.layers < 1 or self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError("stack geometry needs layers, dim, heads >= 1 with heads dividing dim")
        object.__setattr__(self, "windows", tuple(tuple(int(e) for e in w) for w in self.windows))
        object.__setattr__(self, "tied_queries", tuple(tuple(int(e) for e in p) for p in self.tied_queries))
        object.__setattr__(self, "redundant", tuple(int(e) for e in self.redundant))
        self.schedule()

    @classmethod
    def preset(cls, name: str, **overrides) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[name]
        base = dict(
            mapper=MapperConfig(MapperKind.EBQM, 0.5, BetaParams(p["alpha"], p["beta"])),
            tau=p["tau"], windows=p["windows"], epochs=p["epochs"],
        )
        base.update(overrides)
        return cls(**base)

    def schedule(self) -> StageSchedule:
        if self.stages is not None:
            return schedule_from_dict(self.stages, self.mapper, self.tau)
        return StageSchedule.from_windows(self.windows, self.mapper, self.tau)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mapper"] = self.mapper.as_dict()
        d["windows"] = [list(w) for w in self.windows]
        d["tied_queries"] = [list(p) for p in self.tied_queries]
        d["redundant"] = list(self.redundant)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if "mapper" in d:
            d["mapper"] = mapper_from_dict(d["mapper"])
        if "schedule" in d:
            d["stages"] = d.pop("schedule")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if preset:
            return cls.preset(preset, **d)
        return cls(**d)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding output location."""
        d = self.to_dict()
        d.pop("out", None)
        d.pop("plots", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(_read_json(path))
