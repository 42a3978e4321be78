"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

SEED_ENV = "CGTRACK_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    model_variant: str = "T"
    head_eg_ratio: int = 2
    loss_lambda_giou: float = 2.0
    loss_lambda_l1: float = 5.0
    train_lr: float = 4e-5
    train_weight_decay: float = 1e-4
    train_steps: int = 200
    train_batch: int = 8
    train_center_jitter: float = 0.12
    train_scale_jitter: float = 0.05
    track_search_factor: float = 4.0
    track_template_factor: float = 2.0
    track_hanning_weight: float = 0.49
    synth_name: str = "synth"
    synth_image_size: int = 320
    synth_frames: int = 20
    synth_target_min: int = 28
    synth_target_max: int = 40
    synth_velocity_x: float = 0.0
    synth_velocity_y: float = 0.0
    synth_scale_amplitude: float = 0.0
    synth_occluder: bool = False

    # "model.variant" <-> model_variant
    @staticmethod
    def _attr(key: str) -> str:
        return key.strip().replace(".", "_")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name.replace("_", ".", 1) if "_" in f.name and f.name != "seed" else f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, env: bool = True) -> "RunConfig":
        cfg = cls()
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            attr = cls._attr(key)
            if attr not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            setattr(cfg, attr, _convert(value, types[attr]))
        if env and os.environ.get(SEED_ENV):
            cfg.seed = int(os.environ[SEED_ENV])
        return cfg

    @classmethod
    def load(cls, path, env: bool = True) -> "RunConfig":
        return cls.parse(Path(path).read_text(), env=env)

    @classmethod
    def default(cls, env: bool = True) -> "RunConfig":
        return cls.parse("", env=env)

    def dumps(self) -> str:
        lines = []
        for f, key in zip(fields(self), self.keys()):
            v = getattr(self, f.name)
            lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _convert(value: str, typ):
    name = typ if isinstance(typ, str) else typ.__name__
    if name == "bool":
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes", "on")
    if name == "int":
        return int(value)
    if name == "float":
        return float(value)
    return value
