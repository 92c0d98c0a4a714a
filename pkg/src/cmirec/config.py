"""Flat ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DAY_SECONDS
from .evaluation import RankMode
from .model import Hyperparams
from .training import TrainConfig

ALIASES = {
    "m": "num_interests",
    "d": "dim",
    "eps": "epsilon",
    "f": "max_len",
    "n": "num_negatives",
    "K": "top_k",
    "k": "top_k",
    "batch": "batch_size",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    interactions: str = ""
    checkpoint: str = ""
    output_dir: str = "cmi_out"
    delimiter: str = ","
    span_days: int = 14
    day_length: int = DAY_SECONDS
    rank_mode: str = RankMode.COMBINED.value
    seed: int = 0
    threads: int = 1
    max_epochs: int = 50
    instances_per_user: int = 8
    log_elapsed: bool = True
    plots: bool = True

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "model.cmi"

    def train_config(self) -> TrainConfig:
        return TrainConfig(hyper=self.hyper, max_epochs=self.max_epochs, seed=self.seed,
                           instances_per_user=self.instances_per_user, threads=self.threads,
                           rank_mode=RankMode(self.rank_mode))

    def items(self):
        for f in fields(Hyperparams):
            yield f.name, getattr(self.hyper, f.name)
        for f in fields(self):
            if f.name != "hyper":
                yield f.name, getattr(self, f.name)

    def to_text(self) -> str:
        return "".join(f"{key} = {_format(value)}\n" for key, value in self.items())

    def validate(self, need_interactions=False, need_checkpoint=False):
        try:
            self.hyper.validate()
            RankMode(self.rank_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.span_days < 3:
            raise ConfigError("span_days must be >= 3")
        if self.threads < 1 or self.max_epochs < 0 or self.instances_per_user < 1:
            raise ConfigError("threads, instances_per_user must be >= 1 and max_epochs >= 0")
        if need_interactions and not Path(self.interactions).is_file():
            raise ConfigError(f"interactions file not found: {self.interactions or '(unset)'}")
        if need_checkpoint and not self.checkpoint_path.is_file():
            raise ConfigError(f"checkpoint not found: {self.checkpoint_path}")
        return self


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value == "\t":
        return "\\t"
    return str(value)


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return "\t" if raw == "\\t" else raw


def apply_setting(config: RunConfig, key: str, raw: str) -> RunConfig:
    key = ALIASES.get(key.strip(), key.strip())
    hyper_names = {f.name for f in fields(Hyperparams)}
    run_names = {f.name for f in fields(RunConfig)} - {"hyper"}
    try:
        if key in hyper_names:
            value = _coerce(raw, getattr(config.hyper, key))
            hyper = dataclasses.replace(config.hyper, **{key: value})
            return dataclasses.replace(config, hyper=hyper)
        if key in run_names:
            return dataclasses.replace(config, **{key: _coerce(raw, getattr(config, key))})
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str, config: RunConfig | None = None) -> RunConfig:
    config = config or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        config = apply_setting(config, key, raw)
    return config


def load_config(path=None, overrides=()) -> RunConfig:
    config = RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        config = parse_config(text, config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        config = apply_setting(config, key, raw)
    return config
