"""Waveform critics for optional adversarial codec training (least-squares GAN)."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .._validation import ValidationError
from ..features import stft_magnitude


class STFTCritic(nn.Module):
    """Single-resolution critic over the log-magnitude spectrogram."""

    def __init__(self, n_fft: int = 1024, channels: int = 16):
        super().__init__()
        self.n_fft = n_fft
        self.convs = nn.ModuleList([
            nn.Conv2d(1, channels, (3, 9), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 3), padding=(1, 1)),
        ])
        self.out = nn.Conv2d(channels, 1, (3, 3), padding=(1, 1))

    def forward(self, x):
        """x [B, S] -> (scores, feature maps)."""
        y = torch.log1p(stft_magnitude(x, self.n_fft)).transpose(1, 2).unsqueeze(1)  # [B, 1, frames, bins]
        feats = []
        for conv in self.convs:
            y = F.leaky_relu(conv(y), 0.1)
            feats.append(y)
        return [self.out(y)], feats


class PeriodCritic(nn.Module):
    def __init__(self, period: int, channels: int = 16):
        super().__init__()
        self.period = period
        self.convs = nn.ModuleList([
            nn.Conv2d(1, channels, (5, 1), stride=(3, 1), padding=(2, 0)),
            nn.Conv2d(channels, channels, (5, 1), stride=(3, 1), padding=(2, 0)),
            nn.Conv2d(channels, channels, (5, 1), padding=(2, 0)),
        ])
        self.out = nn.Conv2d(channels, 1, (3, 1), padding=(1, 0))

    def forward(self, x):
        b, s = x.shape
        pad = (-s) % self.period
        if pad:
            x = F.pad(x, (0, pad), mode="reflect" if pad < s else "constant")
        y = x.view(b, 1, -1, self.period)
        feats = []
        for conv in self.convs:
            y = F.leaky_relu(conv(y), 0.1)
            feats.append(y)
        return self.out(y), feats


class MultiPeriodCritic(nn.Module):
    def __init__(self, periods=(2, 3, 5, 7, 11), channels: int = 16):
        super().__init__()
        self.critics = nn.ModuleList(PeriodCritic(p, channels) for p in periods)

    def forward(self, x):
        scores, feats = [], []
        for critic in self.critics:
            s, f = critic(x)
            scores.append(s)
            feats.extend(f)
        return scores, feats


class CombinedCritic(nn.Module):
    def __init__(self, kinds: str = "stft"):
        super().__init__()
        parts = kinds.split("+")
        unknown = set(parts) - {"stft", "mpd"}
        if unknown:
            raise ValidationError(f"unknown critic kinds {sorted(unknown)}")
        self.parts = nn.ModuleList(
            STFTCritic() if kind == "stft" else MultiPeriodCritic() for kind in parts)

    def forward(self, x):
        scores, feats = [], []
        for part in self.parts:
            s, f = part(x)
            scores.extend(s)
            feats.extend(f)
        return scores, feats


def critic_loss(critic: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    real_scores, _ = critic(real)
    fake_scores, _ = critic(fake.detach())
    return sum(((1 - r) ** 2).mean() + (f ** 2).mean() for r, f in zip(real_scores, fake_scores))


def generator_adversarial_losses(critic: nn.Module, real: torch.Tensor, fake: torch.Tensor):
    """(adversarial, relative feature matching) losses for the generator."""
    fake_scores, fake_feats = critic(fake)
    with torch.no_grad():
        _, real_feats = critic(real)
    adv = sum(((1 - s) ** 2).mean() for s in fake_scores)
    feat = sum((r - f).abs().mean() / (r.abs().mean() + 1e-5) for r, f in zip(real_feats, fake_feats))
    return adv, feat / max(len(real_feats), 1)
