"""Phoneme encoder, length regulator, phoneme-level pooling and the token denoisers."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .._validation import EmptyInputError, ValidationError, check_durations
from ..codec.layers import ConditionalLayerNorm, sinusoidal_embedding
from ..fvq import FVQBranch, nearest_codeword


def length_regulate(features: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row ``i`` of ``features`` [L, D] ``durations[i]`` times -> [sum(d), D]."""
    d = torch.as_tensor(check_durations(durations), dtype=torch.long)
    if d.shape[0] != features.shape[0]:
        raise ValidationError(f"{features.shape[0]} phonemes but {d.shape[0]} durations")
    return torch.repeat_interleave(features, d, dim=0)


def frame_to_phone(durations) -> np.ndarray:
    d = check_durations(durations)
    return np.repeat(np.arange(len(d)), d)


def phoneme_pool(pre_quant: torch.Tensor, durations, branch: FVQBranch) -> torch.Tensor:
    """Per-phoneme prosody codes from frame-level pre-quantization vectors.

    ``pre_quant`` [T, d] lives in the branch's low-dimensional space.  Frames of
    each phoneme are averaged and the mean is looked up in the first-level
    codebook; phonemes with zero frames pool to the zero vector.
    """
    d = check_durations(durations)
    if int(d.sum()) != pre_quant.shape[0]:
        raise ValidationError(f"durations sum to {int(d.sum())} but there are {pre_quant.shape[0]} frames")
    if len(d) == 0:
        raise EmptyInputError("no phonemes to pool")
    idx = torch.as_tensor(frame_to_phone(d), dtype=torch.long)
    sums = torch.zeros(len(d), pre_quant.shape[1], dtype=pre_quant.dtype).index_add_(0, idx, pre_quant)
    counts = torch.as_tensor(d, dtype=pre_quant.dtype).clamp(min=1).unsqueeze(1)
    pooled = sums / counts
    codes, _ = nearest_codeword(pooled, branch.codebooks[0].detach().to(pooled.dtype))
    return codes


class PositionalEncoding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.scale = nn.Parameter(torch.ones(()))

    def forward(self, x):
        pos = torch.arange(x.shape[1], device=x.device)
        return x + self.scale * sinusoidal_embedding(pos, self.dim).to(x.dtype)


class ConvFFN(nn.Module):
    """Position-wise feed-forward with a 1-D convolution as its first layer."""

    def __init__(self, dim: int, mult: int = 2, kernel_size: int = 3, dropout: float = 0.0):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim * mult, kernel_size, padding=kernel_size // 2)
        self.out = nn.Linear(dim * mult, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        if pad_mask is not None:
            x = x.masked_fill(pad_mask.unsqueeze(-1), 0.0)
        y = F.gelu(self.conv(x.transpose(1, 2))).transpose(1, 2)
        return self.out(self.dropout(y))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mult: int, kernel_size: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = ConvFFN(dim, mult, kernel_size, dropout)

    def forward(self, x, pad_mask=None):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, key_padding_mask=pad_mask, need_weights=False)[0]
        return x + self.ffn(self.norm2(x), pad_mask)


class PhonemeEncoder(nn.Module):
    def __init__(self, num_phones: int, dim: int = 96, layers: int = 2, heads: int = 4, mult: int = 2,
                 kernel_size: int = 9, dropout: float = 0.0):
        super().__init__()
        self.num_phones = num_phones
        self.embed = nn.Embedding(num_phones, dim)
        self.pos = PositionalEncoding(dim)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, mult, kernel_size, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, phones: torch.Tensor, pad_mask=None) -> torch.Tensor:
        """phones [B, L] -> features [B, L, D]."""
        if phones.numel() and (int(phones.min()) < 0 or int(phones.max()) >= self.num_phones):
            raise ValidationError(f"phoneme ids must lie in [0, {self.num_phones})")
        x = self.pos(self.embed(phones))
        for layer in self.layers:
            x = layer(x, pad_mask)
        return self.norm(x)


class DenoiserLayer(nn.Module):
    """Transformer layer whose norms take their scale and shift from the time/slot vector."""

    def __init__(self, dim: int, heads: int, mult: int, kernel_size: int, cond_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = ConditionalLayerNorm(dim, cond_dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = ConditionalLayerNorm(dim, cond_dim)
        self.ffn = ConvFFN(dim, mult, kernel_size, dropout)

    def forward(self, x, cond, pad_mask=None):
        y = self.norm1(x, cond)
        x = x + self.attn(y, y, y, key_padding_mask=pad_mask, need_weights=False)[0]
        return x + self.ffn(self.norm2(x, cond), pad_mask)


class TokenDenoiser(nn.Module):
    """Shared trunk predicting clean tokens for several (attribute, level) slots.

    Each slot owns a target-token embedding (with an extra MASK row) and an
    output head; conditioning code streams own embeddings shared across slots.
    Continuous conditioning (phoneme features) enters through a projection.
    """

    def __init__(self, slots: dict, cond_streams: dict, dim: int = 96, layers: int = 3, heads: int = 4,
                 mult: int = 2, kernel_size: int = 3, feature_dim: int | None = None, dropout: float = 0.0):
        super().__init__()
        self.slots = dict(slots)
        self.cond_streams = dict(cond_streams)
        self.slot_index = {s: i for i, s in enumerate(self.slots)}
        self.dim = dim
        cond_dim = dim
        self.token_embed = nn.ModuleDict({s: nn.Embedding(v + 1, dim) for s, v in self.slots.items()})
        self.cond_embed = nn.ModuleDict({s: nn.Embedding(v, dim) for s, v in self.cond_streams.items()})
        self.feature_proj = nn.Linear(feature_dim or dim, dim)
        self.region = nn.Embedding(2, dim)
        self.pos = PositionalEncoding(dim)
        self.slot_embed = nn.Embedding(len(self.slots), cond_dim)
        self.time_mlp = nn.Sequential(nn.Linear(dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        self.layers = nn.ModuleList(
            DenoiserLayer(dim, heads, mult, kernel_size, cond_dim, dropout) for _ in range(layers))
        self.norm = ConditionalLayerNorm(dim, cond_dim)
        self.heads = nn.ModuleDict({s: nn.Linear(dim, v) for s, v in self.slots.items()})

    def mask_id(self, slot: str) -> int:
        return self.slots[slot]

    def forward(self, slot: str, tokens: torch.Tensor, prompt_len: torch.Tensor, t: torch.Tensor,
                features: torch.Tensor | None = None, cond_codes: dict | None = None,
                pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Logits [B, N, V_slot].

        Args:
            tokens: [B, N] with the slot's MASK id at masked positions.
            prompt_len: [B] number of leading prompt positions.
            t: [B] diffusion times in [0, 1].
            features: [B, N, F] continuous conditioning (zeros over prompts).
            cond_codes: stream name -> [B, N] conditioning codes.
            pad_mask: [B, N], True at padding.
        """
        if slot not in self.slots:
            raise ValidationError(f"unknown slot {slot!r}")
        b, n = tokens.shape
        x = self.token_embed[slot](tokens)
        pos = torch.arange(n).unsqueeze(0)
        x = x + self.region((pos >= prompt_len.view(-1, 1)).long())
        if features is not None:
            x = x + self.feature_proj(features)
        for name, codes in (cond_codes or {}).items():
            x = x + self.cond_embed[name](codes)
        x = self.pos(x)
        slot_ids = torch.full((b,), self.slot_index[slot], dtype=torch.long)
        cond = self.time_mlp(sinusoidal_embedding(t.float() * 1000.0, self.dim)) + self.slot_embed(slot_ids)
        for layer in self.layers:
            x = layer(x, cond, pad_mask)
        return self.heads[slot](self.norm(x, cond))


FRAME_SLOTS = ("prosody0", "content0", "content1", "detail0", "detail1", "detail2")
PHONE_SLOTS = ("ph_prosody", "duration")


def slot_name(attribute: str, level: int) -> str:
    return f"{attribute}{level}"


def frame_slot_conditions(slot: str) -> tuple:
    """Earlier frame slots a slot is conditioned on, following the generation chain."""
    order = FRAME_SLOTS
    return order[:order.index(slot)]

