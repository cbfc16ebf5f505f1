"""Run configuration: a nested YAML document mapped onto dataclasses.

Unknown keys and wrongly typed values are rejected with the dotted path of
the offending field, e.g. ``rl.tua: unknown key (known: T, a, beta, ...)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .adapters import AdapterSpec
from .ippo import RLConfig
from .model import ModelConfig
from .training import TrainConfig

STAGES = ("pretrain", "multi", "rl")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    pool_size: int = 8
    n_scenes: int = 4096
    seed: int = 0
    path: str | None = None  # a gen-data directory; generated in memory when absent
    eval_count: int = 64
    eval_seed: int = 999
    gen_subjects: int = 2


@dataclass
class SampleConfig:
    T: int = 16
    seed: int = 0


def _pretrain_default() -> TrainConfig:
    return TrainConfig(steps=3000, lr=1e-3, lam=0.0, n_subjects=1)


def _multi_default() -> TrainConfig:
    return TrainConfig(steps=5000, lr=1e-3, lam=0.3, n_subjects=2)


@dataclass
class RunConfig:
    stage: str = "multi"
    seed: int = 0
    out: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    adapters: AdapterSpec = field(default_factory=AdapterSpec)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_default)
    multi: TrainConfig = field(default_factory=_multi_default)
    rl: RLConfig = field(default_factory=RLConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def validate(self) -> "RunConfig":
        if self.stage not in STAGES:
            raise ConfigError(f"stage: must be one of {STAGES}, got {self.stage!r}")
        for name in ("pretrain", "multi"):
            block = getattr(self, name)
            if block.lam < 0:
                raise ConfigError(f"{name}.lam: must be >= 0")
            if block.steps < 0 or block.batch_size < 1:
                raise ConfigError(f"{name}: steps must be >= 0 and batch_size >= 1")
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        try:
            self.rl.validate()
        except ValueError as exc:
            raise ConfigError(f"rl: {exc}") from None
        if self.adapters.ffn_mode not in ("moe", "lora", "none") or self.adapters.attn_mode not in ("lora", "none"):
            raise ConfigError("adapters: ffn_mode must be moe|lora|none and attn_mode lora|none")
        if not 1 <= self.adapters.top_k <= self.adapters.n_experts:
            raise ConfigError("adapters.top_k: must be in 1..n_experts")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = [f.name for f in dataclasses.fields(tp) if f.init]
        unknown = sorted(set(value) - set(names))
        if unknown:
            where = f"{path}.{unknown[0]}" if path else unknown[0]
            raise ConfigError(f"{where}: unknown key (known: {', '.join(sorted(names))})")
        kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path or '<root>'}: {exc}") from None
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        item = args[0] if args else Any
        return tuple(_build(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is Any:
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{dotted}: {k} is not a mapping")
        node = nxt
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the YAML file, then ``key.path=value`` overrides (last wins)."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        doc = loaded or {}
    base = _to_plain(RunConfig())
    merged = _merge(base, doc, "")
    for text in overrides or []:
        key, value = parse_override(text)
        _set_dotted(merged, key, value)
    return _build(RunConfig, merged, "").validate()


def _merge(base: dict, upd: dict, path: str) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}.{k}" if path else k)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)

