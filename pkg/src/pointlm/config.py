"""Run configuration: named presets plus INI or JSON overrides.

INI files use one section per component (``[embed]``, ``[model]``, ``[hga]``,
``[schedule]``, ``[pretrain]``, ``[tune]``, ``[data]``, ``[run]``); values are
Python literals (``3``, ``0.2``, ``true``, ``[1, 2]``) or bare strings.
"""

from __future__ import annotations

import ast
import configparser
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .embedding import EmbedConfig
from .hga import HgaPlan
from .model import ModelConfig
from .train import TrainConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    alpha: float = 0.02
    s_min: float = 0.02
    s_max: float = 1.0


@dataclass(frozen=True)
class DataConfig:
    n_clouds: int = 256
    n_points: int = 512
    tune_split: int = 32
    noise: float = 0.005
    families: tuple[str, ...] = ("sphere", "box", "cylinder", "torus", "composite")
    teacher_dir: str = ""


@dataclass(frozen=True)
class RunSection:
    preset: str = "desk"
    seed: int = 0
    dtype: str = "float64"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hga: HgaPlan = field(default_factory=HgaPlan.desk)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    tune: TrainConfig = field(default_factory=lambda: TrainConfig(stage="tune"))
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("run", "embed", "model", "hga", "schedule", "pretrain", "tune", "data")

    def to_dict(self) -> dict:
        out = {}
        for name in self.SECTIONS:
            obj = getattr(self, name)
            out[name] = obj.to_dict() if isinstance(obj, HgaPlan) else asdict(obj)
        return out

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig(
            run=RunSection("desk"),
            embed=EmbedConfig.desk(),
            model=ModelConfig.desk(),
            hga=HgaPlan.desk(),
            # coarser than the default schedule so 32 unit-scale tokens actually merge
            schedule=ScheduleConfig(alpha=0.2, s_min=0.2, s_max=2.0),
            pretrain=TrainConfig(stage="pretrain", steps=200, batch_size=8, lr=4e-4),
            tune=TrainConfig(stage="tune", steps=500, batch_size=8, lr=1e-3, eval_every=10, target_accuracy=0.95),
            data=DataConfig(),
        )
    if name == "paper":
        return RunConfig(
            run=RunSection("paper"),
            embed=EmbedConfig.paper(),
            model=ModelConfig.paper(),
            hga=HgaPlan.paper(),
            schedule=ScheduleConfig(),
            pretrain=TrainConfig(stage="pretrain", steps=0, batch_size=128, lr=4e-4, train_lm_io=False),
            tune=TrainConfig(stage="tune", steps=0, batch_size=32, lr=2e-5),
            data=DataConfig(n_points=8192),
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def _coerce(section: str, key: str, value, current):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "yes", "1"):
                return True
            if value.lower() in ("false", "no", "0"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"[{section}] {key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value


def apply_overrides(cfg: RunConfig, overrides: dict[str, dict]) -> RunConfig:
    """Return ``cfg`` with section values replaced; unknown sections or keys are errors."""
    if "run" in overrides and "preset" in overrides["run"] and overrides["run"]["preset"] != cfg.run.preset:
        cfg = preset(overrides["run"]["preset"])
    for section, values in overrides.items():
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; known: {', '.join(RunConfig.SECTIONS)}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        obj = getattr(cfg, section)
        if isinstance(obj, HgaPlan):
            current = obj.to_dict()
            known = set(current)
        else:
            current = {f.name: getattr(obj, f.name) for f in fields(obj)}
            known = set(current)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
        new = {k: _coerce(section, k, v, current[k]) for k, v in values.items()}
        try:
            if isinstance(obj, HgaPlan):
                obj = HgaPlan(**{**current, **new})
            else:
                obj = replace(obj, **new)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{section}]: {e}") from None
        setattr(cfg, section, obj)
    if cfg.embed.model_dim != cfg.model.model_dim:
        raise ConfigError("[embed] model_dim must equal [model] model_dim")
    if cfg.pretrain.stage != "pretrain" or cfg.tune.stage != "tune":
        raise ConfigError("stage keys cannot be overridden")
    try:
        cfg.hga.validate(cfg.model.layers)
    except ValueError as e:
        raise ConfigError(f"[hga]: {e}") from None
    return cfg


def _literal(raw: str):
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(raw.strip())
    except (ValueError, SyntaxError):
        return raw.strip()


def read_overrides(path) -> dict[str, dict]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object of sections")
        return data
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return {s: {k: _literal(v) for k, v in parser.items(s)} for s in parser.sections()}


def load_config(path=None, preset_name: str | None = None, seed: int | None = None) -> RunConfig:
    overrides = read_overrides(path) if path else {}
    name = preset_name or overrides.get("run", {}).get("preset", "desk")
    cfg = preset(name)
    overrides.setdefault("run", {})
    overrides["run"]["preset"] = name
    if seed is not None:
        overrides["run"]["seed"] = seed
    return apply_overrides(cfg, overrides)
