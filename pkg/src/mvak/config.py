"""Run configuration: a flat key-value text file plus CLI overrides.

Format: one ``key = value`` per line, ``#`` starts a comment. Unknown keys are
rejected with the offending key named. Integer tuples are comma-separated
(``channel_mults = 1,2,4``); ``attn_stages`` also accepts ``all``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .backbone import BackboneConfig
from .numerics import DomainError

CAMERA_GUIDED = "camera_guided"
GEOMETRY_GUIDED = "geometry_guided"
ARBITRARY = "arbitrary"

MODE_MV_DEFAULTS = {
    CAMERA_GUIDED: "row_wise",
    GEOMETRY_GUIDED: "row_column",
    ARBITRARY: "full",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    mode: str = CAMERA_GUIDED
    dataset: str = "data"
    out: str = "runs"
    seed: int = 0
    # dataset generation
    count: int = 200
    heldout: int = 30
    image_size: int = 32
    film_extent: float = 2.2
    # backbone
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    blocks_per_stage: int = 1
    attn_stages: Optional[tuple] = (1, 2)
    text_dim: int = 64
    time_embed_dim: int = 128
    groups: int = 8
    time_steps: int = 1000
    ref_features: str = "attn_input"
    # adapter
    mv_mode: str = ""  # empty -> mode default
    arch: str = "parallel"
    guider_hidden: int = 16
    # backbone pretraining
    pretrain_epochs: int = 40
    pretrain_batch: int = 16
    pretrain_lr: float = 2e-3
    # adapter training
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    p_drop_text: float = 0.1
    p_drop_image: float = 0.1
    p_drop_both: float = 0.1
    # inference
    steps: int = 50
    alpha: float = 3.0
    beta: float = 3.0
    text_only_scale: float = 7.0
    sample_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODE_MV_DEFAULTS:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.mv_mode:
            self.mv_mode = MODE_MV_DEFAULTS[self.mode]

    @property
    def n_views(self) -> int:
        return 8 if self.mode == ARBITRARY else 6

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            blocks_per_stage=self.blocks_per_stage,
            attn_stages=None if self.attn_stages is None else tuple(self.attn_stages),
            text_dim=self.text_dim,
            image_size=(self.image_size, self.image_size),
            time_embed_dim=self.time_embed_dim,
            time_steps=self.time_steps,
            groups=self.groups,
            ref_features=self.ref_features,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if f.type in ("tuple", "Optional[tuple]", tuple, Optional[tuple]):
        if key == "attn_stages" and raw.lower() in ("all", "none"):
            return None
        return tuple(int(x) for x in raw.split(",") if x.strip())
    default = f.default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except (ValueError, DomainError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values, then CLI overrides, on top of the defaults."""
    values = {}
    if path is not None:
        text = Path(path).read_text()
        values.update(parse_config_text(text, source=str(path)))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    return RunConfig(**values)
