"""Run configuration: one flat file of dotted ``key = value`` lines.

Defaults reproduce the published training recipe (alpha Adam at 0.02 with
betas 0.5/0.999, omega SGD cosine-annealed 0.1 -> 0.001, 200 search
epochs, margin 0.3, center weight 0.5, channel rate 1/4, 8x8 batches);
desk-scale runs override via a config file or ``--set`` flags.  Unknown
keys are rejected, and serialize(parse(text)) is byte-idempotent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataSection:
    source: str = "synthetic"          # synthetic | disk
    root: str = ""                     # sequence directory for source=disk
    identities: int = 16
    frames: int = 32
    image_size: int = 64
    nuisance_rate: float = 0.2
    train_region: int = 128
    eval_region: int = 256
    crop_context: float = 2.0
    eval_identities: int = 4
    eval_frames: int = 16


@dataclass
class NetSection:
    bottom: str = "dual"
    cells: int = 16
    stem_channels: int = 32
    embed_dim: int = 512
    reduction_positions: str = ""      # comma-separated depths; empty = evenly spaced


@dataclass
class SearchSection:
    epochs: int = 200
    batch: int = 16
    alpha_lr: float = 0.02
    alpha_beta1: float = 0.5
    alpha_beta2: float = 0.999
    omega_lr_max: float = 0.1
    omega_lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    channel_rate: float = 0.25
    checkpoint_every: int = 10
    snapshot_every: int = 1
    bg_per_frame: int = 1


@dataclass
class RetrainSection:
    epochs: int = 50
    m: int = 8
    n: int = 8
    bg_per_batch: int = 16
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    checkpoint_every: int = 10


@dataclass
class LossSection:
    margin: float = 0.3
    center_weight: float = 0.5
    normalize_embeddings: bool = False
    jitter: float = 0.2


@dataclass
class AugmentSection:
    flip_prob: float = 0.5
    pad: int = 10
    erase_min: float = 0.02
    erase_max: float = 0.2


@dataclass
class EvalSection:
    protocol: str = "model"            # model | gt | random
    grid_stride: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    search: SearchSection = field(default_factory=SearchSection)
    retrain: RetrainSection = field(default_factory=RetrainSection)
    loss: LossSection = field(default_factory=LossSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        if self.data.source not in ("synthetic", "disk"):
            raise ConfigError(f"data.source must be synthetic|disk, got {self.data.source!r}")
        if self.data.source == "disk" and not self.root_path():
            raise ConfigError("data.source=disk requires data.root")
        if self.net.bottom not in ("single", "dual"):
            raise ConfigError(f"net.bottom must be single|dual, got {self.net.bottom!r}")
        if self.net.stem_channels % 4:
            raise ConfigError("net.stem_channels must be divisible by 4")
        if not 0 < self.search.channel_rate <= 1:
            raise ConfigError("search.channel_rate must be in (0, 1]")
        if self.search.omega_lr_min >= self.search.omega_lr_max:
            raise ConfigError("search.omega_lr_min must be below search.omega_lr_max")
        for name, v in (("search.alpha_lr", self.search.alpha_lr),
                        ("search.omega_lr_max", self.search.omega_lr_max),
                        ("retrain.lr_max", self.retrain.lr_max)):
            if v <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.loss.margin < 0 or self.loss.center_weight < 0:
            raise ConfigError("loss.margin and loss.center_weight must be non-negative")
        if self.eval.protocol not in ("model", "gt", "random"):
            raise ConfigError(f"eval.protocol must be model|gt|random, got {self.eval.protocol!r}")
        self.reduction_positions()  # parses, raising on malformed input
        return self

    def root_path(self):
        return Path(self.data.root) if self.data.root else None

    def reduction_positions(self):
        text = self.net.reduction_positions.strip()
        if not text:
            return ()
        try:
            return tuple(int(tok) for tok in text.split(","))
        except ValueError as exc:
            raise ConfigError(f"net.reduction_positions must be comma-separated ints: {text!r}") from exc


_SECTIONS = ("data", "net", "search", "retrain", "loss", "augment", "eval")


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {target_type.__name__}, got {raw!r}") from exc
    return raw


def set_key(cfg: RunConfig, key: str, raw_value: str) -> None:
    """Assign one dotted key, coercing to the field's declared type."""
    parts = key.split(".")
    if len(parts) == 1:
        section, name = None, parts[0]
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        section, name = parts
    else:
        raise ConfigError(f"unknown config key {key!r}")
    target = cfg if section is None else getattr(cfg, section)
    known = {f.name for f in fields(target)}
    if name not in known or name in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    # field types are inferred from the defaults, which are always set
    setattr(target, name, _coerce(str(raw_value), type(getattr(target, name)), key))


def flatten(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: RunConfig) -> str:
    lines = [f"{k} = {_format_value(v)}" for k, v in sorted(flatten(cfg).items())]
    return "\n".join(lines) + "\n"


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        set_key(cfg, key, value)
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text, base)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()[:12]
