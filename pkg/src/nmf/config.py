"""TOML run configuration with strict key validation and --set overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

import tomli

from .optim import TrainConfig
from .render import RenderConfig


@dataclass
class SceneConfig:
    resolution: int = 32
    density_rank: int = 8
    feature_rank: int = 24
    feature_dim: int = 16
    env_height: int = 128
    env_width: int = 256
    gain_mode: str = "neural"
    bbox_half: float = 1.4
    seed: int = 0


@dataclass
class DataConfig:
    root: str = ""
    train_split: str = "train"
    test_split: str = "test"


@dataclass
class SyntheticConfig:
    image_size: int = 64
    n_train: int = 16
    n_test: int = 4
    seed: int = 0


@dataclass
class RunConfig:
    scene: SceneConfig
    render: RenderConfig
    train: TrainConfig
    data: DataConfig
    synthetic: SyntheticConfig


_SECTIONS = {
    "scene": SceneConfig,
    "render": RenderConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "synthetic": SyntheticConfig,
}


def _coerce(cls_field, raw, where: str):
    kind = cls_field.type
    value = raw
    if isinstance(raw, list):
        value = tuple(raw)
    try:
        if kind in ("int",) and not isinstance(value, bool):
            return int(value)
        if kind in ("float",):
            return float(value)
    except (TypeError, ValueError):
        raise ValueError(f"bad value for {where}: {raw!r}") from None
    return value


def _build_section(cls, data: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    kwargs = {
        k: _coerce(known[k], v, f"{section}.{k}") for k, v in data.items()
    }
    return cls(**kwargs)


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ValueError(f"malformed TOML in {path}: {exc}") from None
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    for ov in overrides or []:
        if "=" not in ov:
            raise ValueError(f"override must look like section.key=value: {ov!r}")
        key, _, raw = ov.partition("=")
        if key.count(".") != 1:
            raise ValueError(f"override key must be section.key: {key!r}")
        section, name = key.split(".")
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section in override: {section!r}")
        try:
            parsed = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            parsed = raw  # bare strings are allowed
        data.setdefault(section, {})[name] = parsed

    sections = {
        name: _build_section(cls, data.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**sections)


def scene_kwargs(cfg: SceneConfig) -> dict:
    h = cfg.bbox_half
    return dict(
        resolution=(cfg.resolution,) * 3,
        density_rank=cfg.density_rank,
        feature_rank=cfg.feature_rank,
        feature_dim=cfg.feature_dim,
        env_height=cfg.env_height,
        env_width=cfg.env_width,
        gain_mode=cfg.gain_mode,
        bbox=((-h, -h, -h), (h, h, h)),
        seed=cfg.seed,
    )


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable TOML text of the effective configuration."""
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for f in fields(getattr(cfg, name)):
            v = getattr(getattr(cfg, name), f.name)
            if isinstance(v, str):
                lines.append(f'{f.name} = "{v}"')
            elif isinstance(v, bool):
                lines.append(f"{f.name} = {str(v).lower()}")
            elif isinstance(v, tuple):
                lines.append(f"{f.name} = [{', '.join(map(str, v))}]")
            else:
                lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
