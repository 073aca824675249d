"""Run configuration: one JSON file (or flags) covering every exposed constant.

Unknown keys are rejected, both at the section and field level, so typos fail
loudly instead of silently running defaults. CLI `--set section.key=value`
overrides win over the file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataio import DataConfig, SynthSpec
from .geom import CameraIntrinsics
from .loss import LossWeights
from .pose_opt import OptimConfig
from .renderer import RenderConfig
from .scene_init import SceneBuildConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 0   # 0 = auto; compositing is deterministic regardless
    renderer: RenderConfig = field(default_factory=RenderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    scene: SceneBuildConfig = field(default_factory=SceneBuildConfig)
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(
            fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480, near=0.1, far=10.0
        )
    )


_SECTIONS = {
    "renderer": RenderConfig,
    "loss": LossWeights,
    "optimizer": OptimConfig,
    "data": DataConfig,
    "synth": SynthSpec,
    "scene": SceneBuildConfig,
    "intrinsics": CameraIntrinsics,
}
_SCALARS = {"seed": int, "threads": int}


def _build_section(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    coerced = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if isinstance(v, list):
            v = tuple(tuple(e) if isinstance(e, list) else e for e in v)
        coerced[f.name] = v
    return cls(**coerced)


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_SECTIONS) - set(_SCALARS)
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, typ in _SCALARS.items():
        if name in d:
            kwargs[name] = typ(d[name])
    for name, cls in _SECTIONS.items():
        if name in d:
            if not isinstance(d[name], dict):
                raise ValueError(f"config section {name!r} must be a table")
            kwargs[name] = _build_section(cls, d[name], name)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(d)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply "section.key=value" (or "seed=3") strings; values parse as JSON
    with a bare-string fallback."""
    d = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] not in _SCALARS:
                raise ValueError(f"unknown top-level config key {parts[0]!r}")
            d[parts[0]] = value
        elif len(parts) == 2:
            sect, name = parts
            if sect not in _SECTIONS:
                raise ValueError(f"unknown config section {sect!r}")
            d.setdefault(sect, {})[name] = value
        else:
            raise ValueError(f"override key {key!r} has too many dots")
    return config_from_dict(d)


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def resolved_config_json(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True)
