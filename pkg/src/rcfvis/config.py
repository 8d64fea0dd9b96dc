"""Run configuration: flat key=value files, validated field registry.

Every field carries a default and an explicit valid range; unknown keys are
rejected.  The CLI builds its --help from this registry and accepts the same
keys as overrides.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .errors import ConfigError

SEED_ENV_VAR = "RCFVIS_SEED"


@dataclass
class Field:
    name: str
    kind: str  # int | float | bool | str
    default: object
    valid: str
    check: object  # callable(value) -> bool


def _choice(*opts):
    return lambda v: v in opts


def _range(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        ok_lo = v > lo if lo_open else v >= lo
        ok_hi = v < hi if hi_open else v <= hi
        return ok_lo and ok_hi

    return check


REGISTRY: list[Field] = [
    # model
    Field("backbone_channels", "int", 32, "multiple of 4 in [8, 128]", lambda v: 8 <= v <= 128 and v % 4 == 0),
    Field("token_dim", "int", 64, "multiple of 8 in [16, 512]", lambda v: 16 <= v <= 512 and v % 8 == 0),
    Field("code_dim", "int", 64, "[8, 512]", _range(8, 512)),
    Field("seg_channels", "int", 16, "[2, 128]", _range(2, 128)),
    Field("ref_token_k", "int", 2, "one of 1, 2, 4, 8", _choice(1, 2, 4, 8)),
    Field("ref_frames", "int", 1, "[0, 5]", _range(0, 5)),
    Field("num_slots", "int", 10, "[1, 64]", _range(1, 64)),
    Field("enc_depth", "int", 3, "[1, 8]", _range(1, 8)),
    Field("dec_depth", "int", 3, "[1, 8]", _range(1, 8)),
    Field("heads", "int", 8, "[1, 16]", _range(1, 16)),
    Field("audio_enabled", "bool", True, "true or false", lambda v: isinstance(v, bool)),
    Field("audio_dim", "int", 128, "[8, 4096]", _range(8, 4096)),
    Field("lstm_hidden", "int", 32, "[4, 512]", _range(4, 512)),
    Field("ref_compress", "str", "pool", "pool or dwconv", _choice("pool", "dwconv")),
    Field("num_classes", "int", 4, "[1, 16]", _range(1, 16)),
    Field("image_h", "int", 64, "multiple of 8 in [16, 512]", lambda v: 16 <= v <= 512 and v % 8 == 0),
    Field("image_w", "int", 96, "multiple of 8 in [16, 512]", lambda v: 16 <= v <= 512 and v % 8 == 0),
    # training
    Field("lr0", "float", 6e-4, "(0, 1]", _range(0, 1, lo_open=True)),
    Field("iter_max", "int", 1000, "[1, 10000000]", _range(1, 10_000_000)),
    Field("weight_decay", "float", 1e-4, "[0, 1]", _range(0, 1)),
    Field("backbone_lr_mult", "float", 0.1, "(0, 10]", _range(0, 10, lo_open=True)),
    Field("seed", "int", 0, "[0, 2^31)", _range(0, 2**31 - 1)),
    Field("ckpt_every", "int", 200, "[1, 10000000]", _range(1, 10_000_000)),
    Field("train_clips", "int", 64, "[1, 100000]", _range(1, 100_000)),
    Field("val_clips", "int", 16, "[1, 100000]", _range(1, 100_000)),
    Field("probe_clips", "int", 32, "[1, 100000]", _range(1, 100_000)),
    Field("sim_dice", "str", "coeff", "coeff or loss", _choice("coeff", "loss")),
    # generator
    Field("gen_frames", "int", 16, "[2, 512]", _range(2, 512)),
    Field("gen_min_sprites", "int", 2, "[1, 8]", _range(1, 8)),
    Field("gen_max_sprites", "int", 4, "[1, 8]", _range(1, 8)),
    Field("gen_noise", "float", 0.02, "[0, 1]", _range(0, 1)),
    Field("gen_fps", "int", 8, "[1, 64]", _range(1, 64)),
    Field("gen_min_speed", "float", 1.0, "[0, 32]", _range(0, 32)),
    Field("gen_max_speed", "float", 3.0, "[0, 32]", _range(0, 32)),
    Field("gen_min_radius", "float", 6.0, "(0, 64]", _range(0, 64, lo_open=True)),
    Field("gen_max_radius", "float", 12.0, "(0, 64]", _range(0, 64, lo_open=True)),
    Field("probe_speed_scale", "float", 0.25, "(0, 1]", _range(0, 1, lo_open=True)),
    Field("probe_noise", "float", 0.0, "[0, 1]", _range(0, 1)),
    # thresholds / runtime
    Field("mask_threshold", "float", 0.5, "[0, 1]", _range(0, 1)),
    Field("class_threshold", "float", 0.4, "[0, 1]", _range(0, 1)),
    Field("track_max_gap", "int", 5, "[0, 1000]", _range(0, 1000)),
    Field("iou_override", "bool", True, "true or false", lambda v: isinstance(v, bool)),
    Field("probe_norm_p", "str", "1", "1, 2 or inf", _choice("1", "2", "inf")),
    # latency model defaults
    Field("fps_stream", "float", 6.0, "(0, 10000]", _range(0, 10_000, lo_open=True)),
    Field("fps_model", "float", 23.9, "(0, 10000]", _range(0, 10_000, lo_open=True)),
    Field("clip_len", "int", 36, "[1, 100000]", _range(1, 100_000)),
]

_BY_NAME = {f.name: f for f in REGISTRY}


@dataclass
class RunConfig:
    backbone_channels: int = 32
    token_dim: int = 64
    code_dim: int = 64
    seg_channels: int = 16
    ref_token_k: int = 2
    ref_frames: int = 1
    num_slots: int = 10
    enc_depth: int = 3
    dec_depth: int = 3
    heads: int = 8
    audio_enabled: bool = True
    audio_dim: int = 128
    lstm_hidden: int = 32
    ref_compress: str = "pool"
    num_classes: int = 4
    image_h: int = 64
    image_w: int = 96
    lr0: float = 6e-4
    iter_max: int = 1000
    weight_decay: float = 1e-4
    backbone_lr_mult: float = 0.1
    seed: int = 0
    ckpt_every: int = 200
    train_clips: int = 64
    val_clips: int = 16
    probe_clips: int = 32
    sim_dice: str = "coeff"
    gen_frames: int = 16
    gen_min_sprites: int = 2
    gen_max_sprites: int = 4
    gen_noise: float = 0.02
    gen_fps: int = 8
    gen_min_speed: float = 1.0
    gen_max_speed: float = 3.0
    gen_min_radius: float = 6.0
    gen_max_radius: float = 12.0
    probe_speed_scale: float = 0.25
    probe_noise: float = 0.0
    mask_threshold: float = 0.5
    class_threshold: float = 0.4
    track_max_gap: int = 5
    iou_override: bool = True
    probe_norm_p: str = "1"
    fps_stream: float = 6.0
    fps_model: float = 23.9
    clip_len: int = 36

    def validate(self) -> "RunConfig":
        for f in fields(self):
            spec = _BY_NAME[f.name]
            value = getattr(self, f.name)
            if not spec.check(value):
                raise ConfigError(f"config key {f.name}={value!r} outside valid range ({spec.valid})")
        if self.token_dim % self.heads:
            raise ConfigError("token_dim must be divisible by heads")
        if self.gen_min_sprites > self.gen_max_sprites:
            raise ConfigError("gen_min_sprites must not exceed gen_max_sprites")
        if self.gen_min_speed > self.gen_max_speed:
            raise ConfigError("gen_min_speed must not exceed gen_max_speed")
        if self.gen_min_radius > self.gen_max_radius:
            raise ConfigError("gen_min_radius must not exceed gen_max_radius")
        fh, fw = self.image_h // 8, self.image_w // 8
        if self.ref_frames >= 1 and (fh % self.ref_token_k or fw % self.ref_token_k):
            raise ConfigError(
                f"feature grid {fh}x{fw} must divide the reference token grid {self.ref_token_k}"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.image_h // 8, self.image_w // 8

    @property
    def mask_hw(self) -> tuple[int, int]:
        return self.image_h // 2, self.image_w // 2


def _parse_value(spec: Field, raw: str):
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            v = float(raw)
            if math.isnan(v):
                raise ValueError("nan")
            return v
        if spec.kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {spec.name}: cannot parse {raw!r} as {spec.kind}") from e


def apply_assignments(cfg: RunConfig, items: list[tuple[str, str]]) -> RunConfig:
    for key, raw in items:
        spec = _BY_NAME.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(spec, raw))
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional key=value file plus override strings.

    The RCFVIS_SEED environment variable, when set, overrides the seed last.
    """
    cfg = RunConfig()
    items: list[tuple[str, str]] = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{ln}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            items.append((key.strip(), raw))
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must be key=value, got {ov!r}")
        key, raw = ov.split("=", 1)
        items.append((key.strip(), raw))
    apply_assignments(cfg, items)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        apply_assignments(cfg, [("seed", env_seed)])
    return cfg.validate()


def config_help_lines() -> list[str]:
    return [f"  {f.name} = {f.default}  ({f.kind}; {f.valid})" for f in REGISTRY]
