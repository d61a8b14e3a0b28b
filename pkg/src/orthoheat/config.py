"""Run configuration: one flat ``key = value`` file with ``[section]`` headers.

Every section maps onto the dataclass of the module that owns it, so each
value is validated by that module's invariants when the file is loaded.
Unknown sections or keys are errors naming the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actionspace import RefineSpec
from .data import AugmentSpec
from .errors import ConfigurationError
from .geometry import Workspace, parse_keyvalue
from .heatmap import HeatmapSpec
from .model import ModelConfig
from .policy import RolloutConfig, derive_seed
from .scene import DEFAULT_WORKSPACE, TASKS
from .training import TrainConfig

DEFAULT_TASKS = ("reach-block", "press-button", "pick-place-to-plate")


@dataclass(frozen=True)
class EvalSection:
    trials: int = 25
    h_max: int = 25
    tasks: tuple[str, ...] = DEFAULT_TASKS
    refine: bool = True

    def __post_init__(self):
        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown:
            raise ConfigurationError(f"eval.tasks: unknown task(s) {', '.join(unknown)}")


@dataclass(frozen=True)
class CollectSection:
    demos: int = 3
    v_thresh: float = 0.1  # rad/s

    def __post_init__(self):
        if self.demos < 1 or self.v_thresh <= 0:
            raise ConfigurationError("collect.demos must be >= 1 and collect.v_thresh > 0")


@dataclass(frozen=True)
class GroundingSection:
    train: int = 400
    holdout: int = 50
    max_objects: int = 4

    def __post_init__(self):
        if self.train < 1 or self.holdout < 0 or self.max_objects < 1:
            raise ConfigurationError("grounding sizes must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workspace: Workspace = DEFAULT_WORKSPACE
    resolution: int = 224
    grid_dims: tuple[int, int, int] = (100, 100, 100)
    heatmap: HeatmapSpec = HeatmapSpec()
    augment: AugmentSpec = AugmentSpec(max_yaw_deg=0.0)
    refine: RefineSpec = RefineSpec()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(steps=1000)
    pretrain: TrainConfig = TrainConfig(steps=1000, fine_samples=False)
    eval: EvalSection = EvalSection()
    collect: CollectSection = CollectSection()
    grounding: GroundingSection = GroundingSection()
    source: str = field(default="<defaults>", compare=False)

    def component_seed(self, *keys) -> int:
        """Seed for one pipeline stage; every stage derives from the single root seed."""
        return derive_seed(self.seed, *keys)

    def train_config(self, stage: str = "train") -> TrainConfig:
        base = self.train if stage == "train" else self.pretrain
        return dataclasses.replace(base, augment=self.augment, heatmap=self.heatmap,
                                   crop_fraction=self.refine.crop_fraction,
                                   seed=self.component_seed(stage) % 2 ** 32)

    def rollout_config(self, refine: bool | None = None) -> RolloutConfig:
        use = self.eval.refine if refine is None else refine
        return RolloutConfig(h_max=self.eval.h_max, trials=self.eval.trials, coarse_dims=self.grid_dims,
                             refine=self.refine if use else None, resolution=self.resolution,
                             workspace=self.workspace)


# --------------------------------------------------------------------------
# parsing

_SECTIONS = {
    "heatmap": HeatmapSpec, "augment": AugmentSpec, "refine": RefineSpec, "model": ModelConfig,
    "train": TrainConfig, "pretrain": TrainConfig, "eval": EvalSection, "collect": CollectSection,
    "grounding": GroundingSection,
}
# keys owned by another section: resolution by [views], crop_fraction by [refine], the rest by their own
_RESERVED = {"model": {"resolution", "float64"}, "train": {"augment", "heatmap", "seed", "crop_fraction"},
             "pretrain": {"augment", "heatmap", "seed", "crop_fraction"}}


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = raw.replace(",", " ").split()
            if default and isinstance(default[0], str):
                return tuple(items)
            kind = int if default and isinstance(default[0], int) else float
            return tuple(kind(x) for x in items)
        return raw
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _build(base, section: str, kv: dict[str, str]):
    names = {f.name for f in dataclasses.fields(base)}
    reserved = _RESERVED.get(section, set())
    updates = {}
    for key, raw in kv.items():
        full = f"{section}.{key}"
        if key not in names or key in reserved:
            raise ConfigurationError(f"unknown config key {full}")
        updates[key] = _coerce(raw, getattr(base, key), full)
    try:
        return dataclasses.replace(base, **updates)
    except ConfigurationError as e:
        raise ConfigurationError(f"[{section}] {e}") from None


def load_config(text: str = "", overrides=(), source: str = "<string>") -> RunConfig:
    """Parse config text plus ``section.key=value`` overrides into a validated :class:`RunConfig`."""
    kv = parse_keyvalue(text)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not section.key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        kv[k] = v
    grouped: dict[str, dict[str, str]] = {}
    for key, value in kv.items():
        section, _, name = key.rpartition(".")
        grouped.setdefault(section, {})[name] = value
    d = RunConfig()
    out: dict = {"source": source}

    top = grouped.pop("", {})
    for key, raw in top.items():
        if key != "seed":
            raise ConfigurationError(f"unknown config key {key}")
        out["seed"] = _coerce(raw, 0, "seed")
    ws = grouped.pop("workspace", {})
    for key in ws:
        if key not in ("min", "max"):
            raise ConfigurationError(f"unknown config key workspace.{key}")
    lo = _coerce(ws["min"], (0.0,), "workspace.min") if "min" in ws else d.workspace.min_corner
    hi = _coerce(ws["max"], (0.0,), "workspace.max") if "max" in ws else d.workspace.max_corner
    if len(lo) != 3 or len(hi) != 3:
        raise ConfigurationError("workspace.min and workspace.max need three numbers each")
    out["workspace"] = Workspace(np.array(lo, dtype=float), np.array(hi, dtype=float))
    views = grouped.pop("views", {})
    for key in views:
        if key not in ("resolution", "grid_dims"):
            raise ConfigurationError(f"unknown config key views.{key}")
    out["resolution"] = _coerce(views.get("resolution", str(d.resolution)), 0, "views.resolution")
    dims = _coerce(views.get("grid_dims", " ".join(map(str, d.grid_dims))), (0,), "views.grid_dims")
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigurationError("views.grid_dims needs three positive integers")
    out["grid_dims"] = dims

    for section, values in grouped.items():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        out[section] = _build(getattr(d, section), section, values)
    model = out.get("model", d.model)
    out["model"] = _build(model, "views", {"resolution": str(out["resolution"])})
    return RunConfig(**out)


def read_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        return load_config("", overrides, "<defaults>")
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return load_config(p.read_text(encoding="utf-8"), overrides, str(p))


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; ``load_config(dump_config(c)) == c``."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list, np.ndarray)):
            return " ".join(fmt(x) for x in v)
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    lines = [f"seed = {cfg.seed}", "", "[workspace]", f"min = {fmt(cfg.workspace.min_corner)}",
             f"max = {fmt(cfg.workspace.max_corner)}", "", "[views]", f"resolution = {cfg.resolution}",
             f"grid_dims = {fmt(cfg.grid_dims)}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        lines += ["", f"[{section}]"]
        skip = _RESERVED.get(section, set())
        for f in dataclasses.fields(obj):
            if f.name not in skip:
                lines.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
