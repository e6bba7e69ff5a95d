"""Run configuration: defaults, `key = value` file parsing, validation.

Config files are UTF-8 text, one `key = value` per line, `#` starts a
comment. Unknown keys are rejected so typos fail loudly instead of
silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed config files or invalid parameter values."""


@dataclass
class Config:
    # signal front end
    sample_rate: int = 16000
    frame_len: int = 512
    hop: int = 256
    # spectrogram values are multiplied by this before entering the network
    # (keeps MSE losses on a scale where difficulty_threshold is meaningful)
    spec_scale: float = 0.03

    # network
    channels: int = 8
    n_dynamic_blocks: int = 4
    mask_downsample: int = 4
    filter_channels: int = 8
    filter_hidden: int = 32
    local_attention: bool = True
    nonlocal_attention: bool = True
    fusion: str = "feature_filter"  # feature_filter | concat | selective | none
    nonlocal_tokens: str = "time"  # time | freq
    routing: str = "categorical"  # categorical | bernoulli

    # reward / losses
    gamma: float = 8e-2  # per-block routing cost penalty
    difficulty_threshold: float = 6e-2  # MSE level at which difficulty saturates
    beta: float = 0.5  # weight of the intermediate-prediction loss

    # optimization
    batch_size: int = 16
    lr_backbone: float = 1e-3
    lr_filter: float = 1e-4
    stage1_epochs: int = 60
    stage2_epochs: int = 200
    crop_frames: int = 128
    seed: int = 0

    # synthetic corpus
    n_train: int = 200
    n_val: int = 20
    n_test: int = 20
    segment_seconds: float = 4.0
    train_snr_db: tuple = (-5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 5.0)
    eval_snr_db: tuple = (-5.0, 0.0, 5.0)
    noise_kinds: tuple = ("white", "filtered_burst", "babble")
    mix_rule: str = "snr"  # snr | fixed
    fixed_coeff: float = 0.3
    data_seed: int = 1234

    # pseudo-speech generator
    f0_min: float = 90.0
    f0_max: float = 300.0
    n_harmonics: int = 12
    am_rate: float = 4.0
    babble_streams: int = 6

    # paths used by the train/eval subcommands
    data_dir: str = "data"
    ckpt_dir: str = "ckpt"

    # ablation runner budget (kept small: every case trains from scratch)
    ablation_n_train: int = 48
    ablation_n_test: int = 12
    ablation_stage1_epochs: int = 30
    ablation_stage2_epochs: int = 30

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sample_rate != 16000:
            raise ConfigError("sample_rate is fixed at 16000")
        if self.frame_len < 2 or self.hop < 1 or self.hop > self.frame_len:
            raise ConfigError(f"bad frame_len/hop: {self.frame_len}/{self.hop}")
        if self.n_dynamic_blocks < 1:
            raise ConfigError("n_dynamic_blocks must be >= 1")
        if self.mask_downsample not in (1, 2, 4, 8):
            raise ConfigError("mask_downsample must be one of 1, 2, 4, 8")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.difficulty_threshold <= 0:
            raise ConfigError("difficulty_threshold must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.fusion not in ("feature_filter", "concat", "selective", "none"):
            raise ConfigError(f"unknown fusion mode: {self.fusion!r}")
        if self.nonlocal_tokens not in ("time", "freq"):
            raise ConfigError(f"unknown nonlocal_tokens: {self.nonlocal_tokens!r}")
        if self.routing not in ("categorical", "bernoulli"):
            raise ConfigError(f"unknown routing mode: {self.routing!r}")
        if self.mix_rule not in ("snr", "fixed"):
            raise ConfigError(f"unknown mix_rule: {self.mix_rule!r}")
        if not (50.0 < self.f0_min < self.f0_max < 500.0):
            raise ConfigError("f0 range must satisfy 50 < f0_min < f0_max < 500")
        if self.n_harmonics < 1:
            raise ConfigError("n_harmonics must be >= 1")
        for kind in self.noise_kinds:
            for part in kind.split("+"):
                if part not in ("white", "filtered_burst", "babble"):
                    raise ConfigError(f"unknown noise kind: {part!r}")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(f.default, tuple) else v
        return cls(**kwargs)


def _coerce(key: str, raw: str, default):
    """Convert the raw string to the type of the field's default value."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc


def parse_config(text: str) -> Config:
    defaults = Config()
    known = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    return Config(**values)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def save_config(cfg: Config, path) -> None:
    lines = []
    for f in dataclasses.fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
