"""Codec loss terms, weighted assembly, and the learning-rate schedule."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .._validation import NumericError, ValidationError
from ..config import LossWeights, OptimizerConfig
from ..features import log_mel

# the ten weighted terms of the generator objective, in publication order
GENERATOR_TERMS = ("rec", "adv", "feat", "codebook", "commit", "ph", "f0", "gr_ph", "gr_f0", "gr_spk")

_MELS_PER_FFT = {256: 32, 512: 64, 1024: 80, 2048: 80}


def multi_scale_mel_loss(y_hat: torch.Tensor, y: torch.Tensor, scales=(256, 512, 1024),
                         sample_rate: int = 16000) -> torch.Tensor:
    """Mean L1 distance between natural-log mel spectrograms over several FFT sizes."""
    total = 0.0
    for n_fft in scales:
        n_mels = _MELS_PER_FFT.get(n_fft, 64)
        total = total + (log_mel(y_hat, n_fft, n_mels, sample_rate=sample_rate)
                         - log_mel(y, n_fft, n_mels, sample_rate=sample_rate)).abs().mean()
    return total / len(scales)


def _masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(pred.dtype)
    return ((pred - target) ** 2 * mask).sum() / mask.sum().clamp(min=1.0)


def _frame_ce(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), reduction="none")
    mask = mask.reshape(-1).to(ce.dtype)
    return (ce * mask).sum() / mask.sum().clamp(min=1.0)


def codec_loss_terms(out, y_hat, y, phones, f0_z, voiced, speakers, frame_mask=None,
                     mel_scales=(256, 512, 1024)) -> dict:
    """Raw (unweighted) loss terms from one codec forward pass.

    Args:
        out: ``CodecOutput`` from ``factorize``.
        y_hat, y: [B, S] decoded and reference waveforms.
        phones: [B, T] frame phoneme ids.
        f0_z, voiced: [B, T] z-scored F0 and its voicing mask.
        speakers: [B] speaker ids.
        frame_mask: [B, T] valid frames (padding excluded); defaults to all.
    """
    if frame_mask is None:
        frame_mask = torch.ones_like(phones, dtype=torch.bool)
    f0_mask = voiced & frame_mask
    aux = out.aux_logits
    return {
        "rec": multi_scale_mel_loss(y_hat, y, mel_scales),
        "codebook": out.codebook_loss,
        "commit": out.commit_loss,
        "ph": _frame_ce(aux["phone"], phones, frame_mask),
        "f0": _masked_mse(aux["f0"], f0_z, f0_mask),
        "gr_ph": _frame_ce(aux["gr_phone_from_prosody"], phones, frame_mask)
        + _frame_ce(aux["gr_phone_from_detail"], phones, frame_mask),
        "gr_f0": _masked_mse(aux["gr_f0_from_content"], f0_z, f0_mask)
        + _masked_mse(aux["gr_f0_from_detail"], f0_z, f0_mask),
        "gr_spk": F.cross_entropy(aux["gr_speaker_from_sum"], speakers),
        "spk": F.cross_entropy(aux["speaker"], speakers),
    }


def codec_total_loss(terms: dict, weights: LossWeights | None = None):
    """Weighted sum of the supplied terms.

    Returns ``(total, breakdown)`` where ``breakdown`` maps each term name to
    its weighted float contribution.  A non-finite term aborts with its name.
    """
    weights = weights or LossWeights()
    w = weights.as_dict()
    total = None
    breakdown = {}
    for name, value in terms.items():
        if name not in w:
            raise ValidationError(f"no weight for loss term {name!r}")
        value = torch.as_tensor(value)
        if not bool(torch.isfinite(value).all()):
            raise NumericError(f"loss term '{name}' is not finite")
        weighted = w[name] * value
        breakdown[name] = float(weighted.detach())
        total = weighted if total is None else total + weighted
    if total is None:
        total = torch.zeros(())
    return total, breakdown


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Learning rate for 1-based ``step``: linear warmup, then peak * sqrt(warmup / step)."""
    if step < 1:
        raise ValidationError("step counts from 1")
    peak, warmup = cfg.lr, cfg.warmup_steps
    if cfg.schedule == "constant":
        return peak if warmup <= 0 else peak * min(1.0, step / warmup)
    if cfg.schedule != "inverse_sqrt":
        raise ValidationError(f"unknown schedule {cfg.schedule!r}")
    if warmup <= 0:
        return peak / math.sqrt(step)
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)
