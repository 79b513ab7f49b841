"""Experiment configuration: a JSON file with documented sections, loaded
into the library's dataclasses with strict validation.

Schema (all sections optional, defaults apply):

    {
      "seed": 0,
      "out_dir": "runs",
      "model":   { ModelConfig fields },
      "head":    { HeadKind fields },
      "augment": { AugmentConfig fields },
      "train":   { TrainConfig scalar fields },
      "data":    { "images_per_class": 40,
                   "source":  { DomainSpec fields },
                   "targets": { "<name>": { DomainSpec fields }, ... } }
    }

The top-level `seed` is the single seed of the run; `train.seed`,
`train.model`, `train.head`, and `train.augment` are not accepted inside
the "train" section because they are owned by the top-level sections.
Overrides use dotted paths (`augment.t_max=0`, `data.source.noise_level=0.1`);
values are parsed as JSON, falling back to a plain string.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from taskaug.augment import AugmentConfig
from taskaug.models import HeadKind, ModelConfig
from taskaug.tasks import DomainSpec
from taskaug.train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending dotted path."""


def default_targets() -> dict[str, DomainSpec]:
    """The two standard shifted domains: hue rotation and texture swap.

    Both share the source domain's seed so class identities and per-image
    jitter match the source exactly; only the shift differs.
    """
    return {
        "hue150": DomainSpec(hue_rotation_deg=150.0),
        "texswap": DomainSpec(texture_swap=True),
    }


@dataclass(frozen=True)
class DataConfig:
    """Synthetic data layout: one source domain plus named shifted targets."""

    images_per_class: int = 40
    source: DomainSpec = field(default_factory=DomainSpec)
    targets: dict[str, DomainSpec] = field(default_factory=default_targets)

    def __post_init__(self) -> None:
        if self.images_per_class < 1:
            raise ValueError("images_per_class must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; `train` arrives fully assembled with the
    model/head/augment sections and the top-level seed folded in."""

    seed: int = 0
    out_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


# fields of the "train" section; the rest of TrainConfig is owned elsewhere
_TRAIN_OWNED_ELSEWHERE = frozenset({"seed", "model", "head", "augment"})


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(tp, value, path: str):
    """Coerce one JSON value to the annotated field type, or raise
    ConfigError naming `path`."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {_type_name(type(value))}")
        return tuple(value)
    if origin is dict:
        _, val_tp = typing.get_args(tp)
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {_type_name(type(value))}")
        return {k: _convert(val_tp, v, _join(path, k)) for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {_type_name(type(value))}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {_type_name(type(value))}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {_type_name(type(value))}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {_type_name(type(value))}")
        return value
    return value


def _build(cls, raw, path: str, exclude: frozenset = frozenset()):
    """Instantiate dataclass `cls` from a JSON object, rejecting unknown
    keys and re-raising validation errors with the dotted path attached."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in exclude}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(
            f"unknown key '{_join(path, unknown[0])}'; valid keys here: {sorted(fields)}"
        )
    kwargs = {name: _convert(fields[name], raw[name], _join(path, name)) for name in raw}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw JSON object against the documented schema."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at the top level")
    known = {"seed", "out_dir", "model", "head", "augment", "train", "data"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'; valid keys here: {sorted(known)}")
    seed = _convert(int, raw.get("seed", 0), "seed")
    out_dir = _convert(str, raw.get("out_dir", "runs"), "out_dir")
    model = _build(ModelConfig, raw.get("model", {}), "model")
    head = _build(HeadKind, raw.get("head", {}), "head")
    augment = _build(AugmentConfig, raw.get("augment", {}), "augment")
    train_raw = raw.get("train", {})
    if isinstance(train_raw, dict):
        for owned in _TRAIN_OWNED_ELSEWHERE & set(train_raw):
            raise ConfigError(
                f"unknown key 'train.{owned}'; '{owned}' is configured at the top level"
            )
    train_partial = _build(TrainConfig, train_raw, "train", exclude=_TRAIN_OWNED_ELSEWHERE)
    train = dataclasses.replace(train_partial, seed=seed, model=model, head=head, augment=augment)
    data = _build(DataConfig, raw.get("data", {}), "data")
    return ExperimentConfig(seed=seed, out_dir=out_dir, train=train, data=data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Resolved config in the documented schema; round-trips through
    config_from_dict and serializes cleanly to JSON."""
    train = {
        f.name: getattr(cfg.train, f.name)
        for f in dataclasses.fields(TrainConfig)
        if f.name not in _TRAIN_OWNED_ELSEWHERE
    }
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "model": dataclasses.asdict(cfg.train.model),
        "head": dataclasses.asdict(cfg.train.head),
        "augment": dataclasses.asdict(cfg.train.augment),
        "train": train,
        "data": {
            "images_per_class": cfg.data.images_per_class,
            "source": dataclasses.asdict(cfg.data.source),
            "targets": {k: dataclasses.asdict(v) for k, v in cfg.data.targets.items()},
        },
    }


def parse_override(item: str) -> tuple[list[str], object]:
    """Split one `dotted.path=value` flag; the value is parsed as JSON,
    falling back to the raw string (so `head.kind=relation` works)."""
    key, sep, text = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override '{item}' must look like dotted.path=value")
    path = key.split(".")
    if any(not part for part in path):
        raise ConfigError(f"override '{item}' has an empty path segment")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return path, value


def apply_overrides(raw: dict, overrides: list[str] | tuple[str, ...]) -> dict:
    """Set each override's leaf inside the raw JSON object (copied)."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}' descends into a non-object value")
        node[path[-1]] = value
    return out


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    default_out: str | None = None,
) -> ExperimentConfig:
    """Read a JSON config file (all defaults when `path` is None), apply
    dotted-path overrides, and validate.

    `default_out` replaces the built-in "runs" default for out_dir; a file
    value or an override still wins over it.
    """
    if path is None:
        raw: dict = {}
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object at the top level")
    if default_out is not None and "out_dir" not in raw:
        raw["out_dir"] = default_out
    return config_from_dict(apply_overrides(raw, overrides))
