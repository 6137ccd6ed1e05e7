"""Run configuration: namespaced keys, documented defaults, canonical round trip.

Config files are flat structured text, one `key = value` per line with JSON
values, e.g.::

    model.hidden_dims = [64, 32, 16]
    train.lr = 0.001

Unknown keys are errors. render() emits every key in sorted order, so
parse(render(config)) == config.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np


class ConfigError(ValueError):
    """Bad configuration: unknown key, wrong type, or inconsistent values."""


@dataclass
class DataConfig:
    limbs: int = 7
    segments_per_limb: int = 1
    ring_resolution: int = 4
    coarse_target: int = 48
    seed: int = 0
    train_samples: int = 256
    test_samples: int = 64
    angle_range: float = 0.5
    image_size: int = 56


@dataclass
class ModelConfig:
    provider: str = "tiny_conv"  # tiny_conv | precomputed
    conv_channels: list = field(default_factory=lambda: [8, 16, 32, 64])
    feature_dir: str = ""
    grid_size: int = 7  # used by the precomputed provider; tiny_conv derives it
    grid_channels: int = 32
    global_dim: int = 64
    hidden_dims: list = field(default_factory=lambda: [64, 32, 16])
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    grid_features: bool = True
    grb_encoders: list = field(default_factory=lambda: [3])
    grb_design: str = "after"  # after | before | parallel
    grb_kind: str = "residual_block"  # residual_block | basic_conv | mlp_equivalent | none
    dropout: float = 0.1
    layer_norm_eps: float = 1e-5
    precision: str = "float64"  # float64 | float32


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    lr_drop_epoch: int = 30
    lr_drop_factor: float = 10.0
    w_vertex_fine: float = 1.0
    w_vertex_coarse: float = 1.0
    w_joint3d: float = 1.0
    w_joint2d: float = 1.0
    mvm_enabled: bool = True
    mvm_ratio_max: float = 0.3
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    checkpoint_every: int = 20
    log_wall_time: bool = False  # True breaks byte-identical logs; labeled in header


@dataclass
class GraphormerConfig:
    """All architectural and training hyperparameters."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # -- derived quantities ------------------------------------------------

    @property
    def n_joints(self) -> int:
        return 1 + self.data.limbs * self.data.segments_per_limb

    @property
    def n_coarse(self) -> int:
        return self.data.coarse_target

    @property
    def grid_size(self) -> int:
        if self.model.provider == "tiny_conv":
            # 4 stride-2 convs; the grid is tapped after the third.
            s = self.data.image_size
            for _ in range(3):
                s = (s + 2 - 3) // 2 + 1
            return s
        return self.model.grid_size

    @property
    def n_grid_tokens(self) -> int:
        return self.grid_size**2 if self.model.grid_features else 0

    @property
    def n_tokens(self) -> int:
        return self.n_grid_tokens + self.n_joints + self.n_coarse

    @property
    def token_dim(self) -> int:
        return self.model.global_dim + 3

    @property
    def dtype(self):
        return np.float64 if self.model.precision == "float64" else np.float32

    def validate(self) -> "GraphormerConfig":
        m, d, t = self.model, self.data, self.train
        if m.provider not in ("tiny_conv", "precomputed"):
            raise ConfigError(f"model.provider: unknown provider {m.provider!r}")
        if m.grb_design not in ("after", "before", "parallel"):
            raise ConfigError(f"model.grb_design: unknown design {m.grb_design!r}")
        if m.grb_kind not in ("residual_block", "basic_conv", "mlp_equivalent", "none"):
            raise ConfigError(f"model.grb_kind: unknown kind {m.grb_kind!r}")
        if m.precision not in ("float64", "float32"):
            raise ConfigError(f"model.precision: unknown precision {m.precision!r}")
        if len(m.hidden_dims) != 3:
            raise ConfigError("model.hidden_dims must list three encoder widths")
        for dim in m.hidden_dims:
            if dim % m.heads != 0:
                raise ConfigError(
                    f"model.heads={m.heads} does not divide hidden dim {dim}"
                )
            if dim % 2 != 0:
                raise ConfigError(f"hidden dim {dim} must be even for the bottleneck")
        if any(e not in (1, 2, 3) for e in m.grb_encoders):
            raise ConfigError(f"model.grb_encoders entries must be in 1..3, got {m.grb_encoders}")
        if m.provider == "tiny_conv":
            if len(m.conv_channels) != 4:
                raise ConfigError("model.conv_channels must list four channel counts")
            if m.grid_channels != m.conv_channels[2]:
                raise ConfigError(
                    f"model.grid_channels={m.grid_channels} must equal conv_channels[2]="
                    f"{m.conv_channels[2]}"
                )
            if m.global_dim != m.conv_channels[3]:
                raise ConfigError(
                    f"model.global_dim={m.global_dim} must equal conv_channels[3]="
                    f"{m.conv_channels[3]}"
                )
        if d.image_size < 8:
            raise ConfigError(f"data.image_size must be >= 8, got {d.image_size}")
        if min(d.limbs, d.segments_per_limb, d.ring_resolution) < 1:
            raise ConfigError("data.limbs, segments_per_limb, ring_resolution must be >= 1")
        n_bones = d.limbs * d.segments_per_limb
        if d.coarse_target < n_bones:
            raise ConfigError(
                f"data.coarse_target={d.coarse_target} below bone count {n_bones}"
            )
        if not 0.0 <= t.mvm_ratio_max <= 1.0:
            raise ConfigError(f"train.mvm_ratio_max must be in [0, 1], got {t.mvm_ratio_max}")
        if t.batch_size < 1 or t.epochs < 0:
            raise ConfigError("train.batch_size must be >= 1 and train.epochs >= 0")
        if t.lr < 0:
            raise ConfigError(f"train.lr must be nonnegative, got {t.lr}")
        weights = (t.w_vertex_fine, t.w_vertex_coarse, t.w_joint3d, t.w_joint2d)
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ConfigError("loss weights must be nonnegative with at least one positive")
        return self


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig}

#: key -> (section, field, type) for every known config key.
KEY_TABLE: dict[str, tuple[str, str, type]] = {
    f"{section}.{f.name}": (section, f.name, f.type)
    for section, cls in _SECTIONS.items()
    for f in fields(cls)
}


def desk_preset() -> GraphormerConfig:
    """Laptop-scale defaults: J=8, V_coarse=48, token_dim=67, dims 64/32/16."""
    return GraphormerConfig()


def paper_faithful_preset() -> GraphormerConfig:
    """Full-scale token structure: 49+14+431 tokens of dim 2051, dims 1024/256/64."""
    return GraphormerConfig(
        data=DataConfig(
            limbs=13,
            segments_per_limb=1,
            ring_resolution=16,
            coarse_target=431,
            image_size=224,
        ),
        model=ModelConfig(
            provider="precomputed",
            grid_size=7,
            grid_channels=1024,
            global_dim=2048,
            hidden_dims=[1024, 256, 64],
        ),
        train=TrainConfig(epochs=200, lr=1e-4, lr_drop_epoch=100),
    )


PRESETS = {"desk": desk_preset, "paper-faithful": paper_faithful_preset}


def _coerce(key: str, value, kind):
    origin = kind if isinstance(kind, type) else type(kind)
    if kind in (int,) or kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return value
    if kind in (float,) or kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if kind in (bool,) or kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind in (str,) or kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    if kind in (list,) or kind == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value type {origin}")


def apply_overrides(config: GraphormerConfig, overrides: dict) -> GraphormerConfig:
    """Return a new config with dotted-key overrides applied."""
    sections = {name: dict() for name in _SECTIONS}
    for key, value in overrides.items():
        if key not in KEY_TABLE:
            raise ConfigError(f"unknown config key: {key}")
        section, fname, kind = KEY_TABLE[key]
        sections[section][fname] = _coerce(key, value, kind)
    return replace(
        config,
        data=replace(config.data, **sections["data"]),
        model=replace(config.model, **sections["model"]),
        train=replace(config.train, **sections["train"]),
    )


def parse_config_text(text: str, base: GraphormerConfig | None = None) -> GraphormerConfig:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        overrides[key] = parsed
    return apply_overrides(base if base is not None else desk_preset(), overrides)


def render_config(config: GraphormerConfig) -> str:
    """Canonical text form: every key, sorted, JSON values."""
    lines = []
    for key in sorted(KEY_TABLE):
        section, fname, _ = KEY_TABLE[key]
        value = getattr(getattr(config, section), fname)
        if isinstance(value, float) and not math.isfinite(value):
            raise ConfigError(f"{key}: non-finite value cannot be rendered")
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def load_config_file(path, base: GraphormerConfig | None = None) -> GraphormerConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def config_hash(config: GraphormerConfig) -> str:
    return hashlib.sha256(render_config(config).encode("utf-8")).hexdigest()
