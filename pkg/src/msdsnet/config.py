"""Strict YAML run configuration (network + training + paths).

Example::

    network:
      num_stages: 3
      num_scales: 3
      channels_per_scale: [8, 16, 16]
      num_keypoints: 3
      variant: full
    train:
      epochs: 100
      loss_weights: {alpha: 0.1}
    data:
      root: data/synth
      out_dir: runs/full

Every key is optional and defaults to the corresponding dataclass field.
Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from .losses import LossWeights
from .network import NetworkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: str | None = None
    out_dir: str | None = None

    def to_dict(self):
        return {
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "data": {"root": self.data_root, "out_dir": self.out_dir},
        }


def _to_python(node, lines, path=()):
    """Convert a composed YAML node, remembering the line of every mapping key."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {key!r}")
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _to_python(v, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, lines, path) for v in node.value]
    return yaml.safe_load(yaml.serialize(node))


def _check_keys(section: dict, allowed, lines, path):
    for key in section:
        if key not in allowed:
            line = lines.get(path + (key,), "?")
            raise ConfigError(f"line {line}: unknown key {'.'.join(path + (key,))!r}")


def parse_run_config(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark else "?"
        raise ConfigError(f"line {line}: {exc.problem or exc}") from exc
    lines: dict = {}
    raw = {} if node is None else _to_python(node, lines)
    if not isinstance(raw, dict):
        raise ConfigError("line 1: top level must be a mapping")
    _check_keys(raw, ("network", "train", "data"), lines, ())

    net_raw = raw.get("network") or {}
    train_raw = dict(raw.get("train") or {})
    data_raw = raw.get("data") or {}
    _check_keys(net_raw, {f.name for f in fields(NetworkConfig)}, lines, ("network",))
    _check_keys(train_raw, {f.name for f in fields(TrainConfig)}, lines, ("train",))
    _check_keys(data_raw, ("root", "out_dir"), lines, ("data",))
    lw = train_raw.pop("loss_weights", None) or {}
    _check_keys(lw, {f.name for f in fields(LossWeights)}, lines, ("train", "loss_weights"))

    def build(cls, kwargs, section):
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            line = lines.get((section,), "?")
            raise ConfigError(f"line {line}: invalid {section} section: {exc}") from exc

    weights = build(LossWeights, lw, "train")
    return RunConfig(
        network=build(NetworkConfig, net_raw, "network"),
        train=build(TrainConfig, {**train_raw, "loss_weights": weights}, "train"),
        data_root=data_raw.get("root"),
        out_dir=data_raw.get("out_dir"),
    )


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    try:
        return parse_run_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
