"""YAML run configuration: loading, strict key validation, flag overrides."""

from __future__ import annotations

import dataclasses
import os
from importlib import resources
from typing import Any, Mapping

import yaml

from zclipkit.policies import (
    AutoClip,
    ClipPolicy,
    FixedClip,
    NoClip,
    PolicyError,
    ZClip,
    parse_policy,
)
from zclipkit.synth import Spike, StreamSpec
from zclipkit.trainer import TrainConfig

TOP_KEYS = {"seed", "stream", "policies", "train", "window", "normality_window", "plot", "sweep"}
SWEEP_KEYS = {"param", "values", "policy", "target"}
POLICY_KEYS = {
    "none": set(),
    "fixed": {"c"},
    "autoclip": {"p", "history_cap"},
    "zclip": {"mode", "z_thres", "percentile", "alpha", "warmup", "epsilon"},
}
_POLICY_TYPES = {"none": NoClip, "fixed": FixedClip, "autoclip": AutoClip, "zclip": ZClip}
STREAM_KEYS = {f.name for f in dataclasses.fields(StreamSpec)}
SPIKE_KEYS = {f.name for f in dataclasses.fields(Spike)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"policy", "seed"}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    stream: dict | None = None
    policies: list[ClipPolicy] = dataclasses.field(default_factory=list)
    train: dict = dataclasses.field(default_factory=dict)
    window: int = 1000
    normality_window: int | None = None
    plot: bool = False
    sweep: dict = dataclasses.field(default_factory=dict)

    def stream_spec(self) -> StreamSpec:
        if self.stream is None:
            raise ConfigError("config has no 'stream' section")
        return build_stream(self.stream, self.seed)

    def train_config(self, policy: ClipPolicy, seed: int | None = None) -> TrainConfig:
        seed = self.seed if seed is None else seed
        try:
            return TrainConfig(policy=policy, seed=seed, **self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None


def _reject_unknown(section: Mapping, allowed: set[str], where: str) -> None:
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(section).__name__}")
    for key in section:
        if key not in allowed:
            prefix = f"{where}." if where else ""
            raise ConfigError(f"unknown key '{prefix}{key}'")


def build_policy(entry: Any, where: str = "policy") -> ClipPolicy:
    if isinstance(entry, str):
        try:
            return parse_policy(entry)
        except PolicyError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if not isinstance(entry, Mapping) or "kind" not in entry:
        raise ConfigError(f"{where}: expected a policy string or a mapping with 'kind'")
    kind = entry["kind"]
    if kind not in POLICY_KEYS:
        raise ConfigError(f"{where}.kind: unknown policy kind {kind!r}")
    args = {k: v for k, v in entry.items() if k != "kind"}
    _reject_unknown(args, POLICY_KEYS[kind], where)
    try:
        return _POLICY_TYPES[kind](**args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_stream(section: Mapping, seed: int = 0) -> StreamSpec:
    _reject_unknown(section, STREAM_KEYS, "stream")
    args = dict(section)
    args.setdefault("seed", seed)
    spikes = []
    for i, sp in enumerate(args.get("spikes") or ()):
        _reject_unknown(sp, SPIKE_KEYS, f"stream.spikes[{i}]")
        try:
            spikes.append(Spike(**sp))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"stream.spikes[{i}]: {exc}") from None
    args["spikes"] = tuple(spikes)
    try:
        return StreamSpec(**args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"stream: {exc}") from None


def parse_config(raw: Mapping | None) -> RunConfig:
    raw = raw or {}
    _reject_unknown(raw, TOP_KEYS, "")
    cfg = RunConfig()
    if "seed" in raw:
        if not isinstance(raw["seed"], int):
            raise ConfigError("seed: expected an integer")
        cfg.seed = raw["seed"]
    if "stream" in raw:
        _reject_unknown(raw["stream"], STREAM_KEYS, "stream")
        cfg.stream = dict(raw["stream"])
        build_stream(cfg.stream, cfg.seed)
    cfg.policies = [build_policy(p, f"policies[{i}]") for i, p in enumerate(raw.get("policies") or ())]
    if "train" in raw:
        _reject_unknown(raw["train"], TRAIN_KEYS, "train")
        cfg.train = dict(raw["train"])
        cfg.train_config(NoClip())
    for key in ("window", "normality_window"):
        if raw.get(key) is not None:
            val = raw[key]
            if not isinstance(val, int) or val < 1:
                raise ConfigError(f"{key}: expected a positive integer, got {val!r}")
            setattr(cfg, key, val)
    cfg.plot = bool(raw.get("plot", False))
    if "sweep" in raw:
        _reject_unknown(raw["sweep"], SWEEP_KEYS, "sweep")
        cfg.sweep = dict(raw["sweep"])
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Parse a YAML config; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("zclipkit").joinpath("configs/default.yaml").read_text("utf-8")
        where = "<default config>"
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        where = str(path)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{where}: invalid YAML ({exc})") from None
    return parse_config(raw)


def packaged_config(name: str) -> str:
    return str(resources.files("zclipkit").joinpath(f"configs/{name}.yaml"))
