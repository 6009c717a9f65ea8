"""Model/training configuration dataclasses, presets, and the key-value config file format.

Config file format: one ``key = value`` per line; ``#`` starts a comment; blank
lines are ignored.  Values are parsed as Python literals when possible
(``1e-4``, ``(2, 4, 5, 5)``, ``True``) and kept as strings otherwise.  Keys may
be namespaced with a section prefix, e.g. ``codec.detail_dropout = 0.2``.
"""

from __future__ import annotations

import ast
import copy
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from ._validation import ValidationError


@dataclass
class CodecConfig:
    sample_rate: int = 16000
    strides: tuple = (2, 4, 5, 5)
    encoder_channels: tuple = (8, 16, 32, 48, 64)
    decoder_mult: int = 2
    residual_dilations: tuple = (1,)
    timbre_dim: int = 64
    timbre_layers: int = 2
    timbre_heads: int = 4
    timbre_pool: str = "mean"
    codebook_size: int = 1024
    codebook_dim: int = 8
    prosody_levels: int = 1
    content_levels: int = 2
    detail_levels: int = 3
    bottleneck: bool = True
    detail_dropout: float = 0.2
    grl_scale: float = 1.0
    num_phones: int = 64
    num_speakers: int = 16

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    @property
    def latent_dim(self) -> int:
        return self.encoder_channels[-1]

    @property
    def total_levels(self) -> int:
        return self.prosody_levels + self.content_levels + self.detail_levels

    def validate(self):
        if self.timbre_pool not in ("mean", "attention"):
            raise ValidationError("timbre_pool must be 'mean' or 'attention'")
        if len(self.encoder_channels) != len(self.strides) + 1:
            raise ValidationError("encoder_channels needs one more entry than strides")
        if not 0 <= self.detail_dropout <= 1:
            raise ValidationError("detail_dropout must lie in [0, 1]")
        if self.codebook_size < 1 or self.codebook_dim < 1:
            raise ValidationError("codebook sizes must be positive")
        return self


@dataclass
class TTSConfig:
    dim: int = 96
    heads: int = 4
    phone_encoder_layers: int = 2
    phone_encoder_kernel: int = 9
    phone_level_layers: int = 2
    frame_level_layers: int = 3
    ffn_mult: int = 2
    ffn_kernel: int = 3
    dropout: float = 0.0
    max_duration: int = 127
    steps: int = 4
    guidance_scale: float = 1.0
    top_k: int = 20
    temperature_start: float = 1.5
    temperature_end: float = 0.0
    gumbel: bool = True
    gumbel_scale: float = 1.0
    cfg_drop_prob: float = 0.15
    cfg_std_axis: str = "position"
    schedule_horizon: float = 1.0
    prompt_seconds: float = 1.0


@dataclass
class LossWeights:
    rec: float = 10.0
    adv: float = 2.0
    feat: float = 2.0
    codebook: float = 1.0
    commit: float = 0.25
    ph: float = 5.0
    f0: float = 5.0
    gr_ph: float = 5.0
    gr_f0: float = 5.0
    gr_spk: float = 1.0
    # speaker classification on the timbre vector; not one of the ten published coefficients
    spk: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f"loss weight {f.name} must be non-negative")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    warmup_steps: int = 5000
    schedule: str = "inverse_sqrt"
    weight_decay: float = 0.0


@dataclass
class CodecTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    crop_frames: int = 40
    log_every: int = 10
    checkpoint_every: int = 500
    seed: int = 0
    use_critic: bool = False
    critic: str = "stft"
    loss_weights: LossWeights = field(default_factory=lambda: LossWeights(adv=0.0, feat=0.0))
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=1e-3, beta1=0.5, beta2=0.9, warmup_steps=0, schedule="constant"))
    mel_scales: tuple = (256, 512, 1024)
    max_skip_fraction: float = 0.1


@dataclass
class DiffusionTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    max_frames: int = 1000
    log_every: int = 10
    checkpoint_every: int = 500
    seed: int = 0
    prompt_fraction: tuple = (0.0, 0.5)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=2e-3, beta1=0.9, beta2=0.98, warmup_steps=100, weight_decay=0.01))
    max_skip_fraction: float = 0.1


# Sizes reported for the full-scale system.  The codec widths are not given
# in full, so those entries follow the DAC-style layout the codec builds on.
PAPER_CODEC = CodecConfig(
    encoder_channels=(64, 128, 256, 512, 256),
    residual_dilations=(1, 3, 9),
    timbre_dim=256,
    timbre_layers=4,
    timbre_heads=8,
    num_phones=128,
    num_speakers=7000,
)
PAPER_TTS = TTSConfig(
    dim=1024, heads=8, phone_encoder_layers=6, phone_level_layers=6, frame_level_layers=12,
    ffn_mult=2, dropout=0.1, prompt_seconds=3.0,
)
PAPER_CODEC_TRAIN = CodecTrainConfig(
    steps=800_000, batch_size=32, crop_frames=80, use_critic=True, critic="mpd+stft",
    loss_weights=LossWeights(),
    optimizer=OptimizerConfig(lr=2e-4, beta1=0.5, beta2=0.9, warmup_steps=0, schedule="constant"),
)
PAPER_DIFFUSION_TRAIN = DiffusionTrainConfig(
    steps=1_000_000, max_frames=10_000,
    optimizer=OptimizerConfig(lr=1e-4, beta1=0.9, beta2=0.98, warmup_steps=5000, weight_decay=0.01),
)

PRESETS = {
    "desk": dict(codec=CodecConfig(), tts=TTSConfig(), codec_train=CodecTrainConfig(),
                 diffusion_train=DiffusionTrainConfig()),
    "paper": dict(codec=PAPER_CODEC, tts=PAPER_TTS, codec_train=PAPER_CODEC_TRAIN,
                  diffusion_train=PAPER_DIFFUSION_TRAIN),
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        return text


def read_config_file(path) -> dict:
    """Parse a key-value config file into a flat ``{key: value}`` dict."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def write_config_file(path, values: dict):
    lines = [f"{k} = {v!r}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def apply_overrides(obj, values: dict, prefix: str = "", strict: bool = True):
    """Set dataclass fields (recursing into nested dataclasses) from flat keys.

    With a ``prefix``, only keys under that section are considered.
    """
    names = {f.name for f in fields(obj)}
    for key, value in values.items():
        if prefix:
            if not key.startswith(prefix + "."):
                continue
            key = key[len(prefix) + 1:]
        head, _, rest = key.partition(".")
        if head not in names:
            if strict:
                raise ValidationError(f"unknown config key {key!r}")
            continue
        current = getattr(obj, head)
        if rest:
            if not dataclasses.is_dataclass(current):
                raise ValidationError(f"{head} has no sub-keys")
            apply_overrides(current, {rest: value})
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, head, value)
    return obj
