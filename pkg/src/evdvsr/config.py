"""Model/training configuration, the flat config-file format, and overrides.

Config files are UTF-8 text, one ``section.key = value`` pair per line, with
``#`` comments. Unknown keys are a hard error. Precedence is
command-line override > config file > built-in default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from evdvsr.errors import ConfigError, InvalidInputError


@dataclass
class ModelConfig:
    channels: int = 32
    residual_blocks: int = 5
    attention_heads: int = 4
    voxel_bins: int = 5
    scale: int = 4
    dcn_groups: int = 4
    dcn_offset_clamp: float = 10.0
    rfd_order: str = "ie_then_ei"        # or "ei_then_ie"
    use_intra: bool = True
    use_inter: bool = True
    use_ega: bool = True
    use_fga: bool = True
    use_rfd_i2e: bool = True

    def __post_init__(self):
        if self.channels % self.attention_heads:
            raise InvalidInputError("channels must divide by attention_heads")
        if self.channels % self.dcn_groups:
            raise InvalidInputError("channels must divide by dcn_groups")
        if self.scale not in (2, 4):
            raise InvalidInputError("scale must be 2 or 4")
        if self.rfd_order not in ("ie_then_ei", "ei_then_ie"):
            raise InvalidInputError(f"unknown rfd_order {self.rfd_order!r}")
        if self.residual_blocks < 1 or self.voxel_bins < 1:
            raise InvalidInputError("residual_blocks and voxel_bins must be >= 1")


@dataclass
class TrainConfig:
    clip_length: int = 15
    crop_size: int = 64
    batch_size: int = 8
    base_lr: float = 1e-4
    lr_min: float = 1e-7
    total_iters: int = 20000
    flip_prob_h: float = 0.5
    flip_prob_v: float = 0.5
    center_crop: bool = False
    seed: int = 0
    eta: float = 1e-8
    use_lr: bool = True                  # MSE reconstruction loss
    use_le: bool = True                  # edge-enhanced loss
    log_every: int = 50
    val_every: int = 1000
    ckpt_every: int = 1000

    def __post_init__(self):
        if self.crop_size % 4:
            raise InvalidInputError("crop_size must be divisible by 4 "
                                    "(flow pyramid depth)")
        if self.clip_length < 2:
            raise InvalidInputError("clip_length must be at least 2")
        if self.total_iters < 0 or self.batch_size < 1:
            raise InvalidInputError("bad optimization sizes")


@dataclass
class SimConfig:
    """Dataset synthesis parameters (simulator + synthetic clip generator)."""

    theta: float = 0.15
    bins: int = 5
    scale: int = 4
    seed: int = 0
    clips: int = 2
    frames_per_clip: int = 20
    lr_height: int = 64
    lr_width: int = 64
    subframes_per_blur: int = 13
    exposure_duty: float = 0.8
    frame_period_us: int = 4000
    speed_min: float = 0.5
    speed_max: float = 3.0
    num_shapes: int = 4
    val_clips: int = 0                   # trailing clips named as held-out

    def __post_init__(self):
        if not 0 < self.exposure_duty < 1:
            raise InvalidInputError("exposure_duty must be in (0, 1)")
        if self.subframes_per_blur < 2:
            raise InvalidInputError("need at least 2 subframes per exposure")


@dataclass
class DataConfig:
    root: str = ""
    train_clips: str = ""                # comma list; empty = all non-val
    val_clips: str = ""                  # comma list; empty = none


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig,
             "sim": SimConfig, "data": DataConfig}


def _parse_value(raw: str, typ: type, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def _known_fields() -> dict[str, dict[str, type]]:
    return {sec: {f.name: f.type if isinstance(f.type, type)
                  else {"int": int, "float": float, "bool": bool,
                        "str": str}[f.type]
            for f in fields(cls)} for sec, cls in _SECTIONS.items()}


def apply_assignment(cfg: Config, key: str, raw_value: str) -> None:
    """Set ``section.field`` on a Config from its textual value."""
    if "." not in key:
        raise ConfigError(f"config key {key!r} must look like section.field")
    section, name = key.split(".", 1)
    table = _known_fields()
    if section not in table:
        raise ConfigError(f"unknown config section {section!r} in {key!r}")
    if name not in table[section]:
        raise ConfigError(f"unknown config key {key!r}")
    value = _parse_value(raw_value, table[section][name], key)
    setattr(getattr(cfg, section), name, value)


def parse_config_text(text: str, cfg: Config | None = None) -> Config:
    cfg = cfg or Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = stripped.partition("=")
        apply_assignment(cfg, key.strip(), value)
    # re-run invariant checks with the final field values
    revalidate(cfg)
    return cfg


def revalidate(cfg: Config) -> None:
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        if hasattr(obj, "__post_init__"):
            obj.__post_init__()


def load_config(path: str | Path, overrides: list[str] | None = None) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cfg = parse_config_text(path.read_text(encoding="utf-8"))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, value = item.partition("=")
        apply_assignment(cfg, key.strip(), value)
    revalidate(cfg)
    return cfg


def dump_config(cfg: Config) -> str:
    lines = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def model_config_hash(mc: ModelConfig) -> str:
    payload = json.dumps(dataclasses.asdict(mc), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def toggle_signature(cfg: Config) -> str:
    """Short key identifying the ablation-relevant toggle set."""
    mc, tc = cfg.model, cfg.train
    parts = [f"intra={int(mc.use_intra)}", f"inter={int(mc.use_inter)}",
             f"ega={int(mc.use_ega)}", f"fga={int(mc.use_fga)}",
             f"i2e={int(mc.use_rfd_i2e)}", f"order={mc.rfd_order}",
             f"Lr={int(tc.use_lr)}", f"Le={int(tc.use_le)}"]
    return ",".join(parts)
