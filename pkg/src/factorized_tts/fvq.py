"""Factorized vector quantization.

Each attribute branch projects encoder frames into a narrow space, quantizes
residually over a small stack of codebooks, and projects the summed codewords
back up.  Gradients bypass the lookup with the straight-through estimator.

Levels inside one branch are residual (level ``l`` quantizes what levels
``< l`` left behind).  This is an assumption: the quantizer counts and the
total bitrate are consistent with it, but a parallel arrangement would be
equally compatible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._validation import EmptyInputError, ValidationError, check_finite

ATTRIBUTE_LEVELS = {"prosody": 1, "content": 2, "detail": 3}


def nearest_codeword(v: torch.Tensor, codebook: torch.Tensor, chunk: int = 4096):
    """Exhaustive Euclidean nearest neighbour with lowest-index tie-breaking.

    Args:
        v: [..., d] query vectors.
        codebook: [K, d] entries.

    Returns:
        (indices [...], codewords [..., d])
    """
    flat = v.reshape(-1, v.shape[-1])
    out = []
    for start in range(0, flat.shape[0], chunk):
        rows = flat[start:start + chunk]
        # explicit differences rather than the expanded dot-product form keep exact ties exact
        dist = (rows.unsqueeze(1) - codebook.unsqueeze(0)).pow(2).sum(-1)
        out.append(dist.argmin(-1))  # argmin returns the first minimum
    idx = torch.cat(out) if out else flat.new_zeros(0, dtype=torch.long)
    idx = idx.reshape(v.shape[:-1])
    return idx, codebook[idx]


def quantize_vector(v, codebook):
    """Quantize a single vector; returns ``(index, codeword)`` as numpy values."""
    v = torch.as_tensor(np.asarray(v, dtype=np.float64))
    cb = torch.as_tensor(np.asarray(codebook, dtype=np.float64))
    check_finite(v, "vector")
    check_finite(cb, "codebook")
    if v.ndim != 1 or cb.ndim != 2 or cb.shape[1] != v.shape[0]:
        raise ValidationError(f"shape mismatch: vector {tuple(v.shape)} vs codebook {tuple(cb.shape)}")
    if cb.shape[0] == 0:
        raise ValidationError("codebook has no entries")
    idx, q = nearest_codeword(v, cb)
    return int(idx), q.numpy()


def codebook_perplexity(codes, codebook_size: int) -> float:
    """exp(entropy) of the empirical code histogram."""
    codes = np.asarray(codes).ravel()
    if codes.size == 0:
        return 0.0
    counts = np.bincount(codes, minlength=codebook_size).astype(np.float64)
    p = counts[counts > 0] / codes.size
    return float(np.exp(-(p * np.log(p)).sum()))


@dataclass
class BranchOutput:
    codes: torch.Tensor          # [B, L, T]
    z: torch.Tensor              # [B, T, D]
    commit_loss: torch.Tensor
    codebook_loss: torch.Tensor
    pre_quant: torch.Tensor      # [B, T, d_low] down-projected input


class FVQBranch(nn.Module):
    """One attribute's quantizer: down-projection, residual codebooks, up-projection.

    With ``bottleneck=False`` the projections are identities and codebooks live
    at the full latent width ``dim``.
    """

    def __init__(self, attribute: str, dim: int, num_levels: int | None = None,
                 codebook_size: int = 1024, codebook_dim: int = 8, bottleneck: bool = True):
        super().__init__()
        if attribute not in ATTRIBUTE_LEVELS:
            raise ValidationError(f"unknown attribute {attribute!r}")
        if num_levels is None:
            num_levels = ATTRIBUTE_LEVELS[attribute]
        if num_levels < 0 or codebook_size <= 0 or codebook_dim <= 0 or dim <= 0:
            raise ValidationError("branch sizes must be positive")
        self.attribute = attribute
        self.dim = dim
        self.num_levels = num_levels
        self.codebook_size = codebook_size
        self.bottleneck = bottleneck
        self.code_dim = codebook_dim if bottleneck else dim
        if bottleneck:
            self.down_proj = nn.Linear(dim, codebook_dim)
            self.up_proj = nn.Linear(codebook_dim, dim)
        else:
            self.down_proj = nn.Identity()
            self.up_proj = nn.Identity()
        self.codebooks = nn.Parameter(torch.randn(num_levels, codebook_size, self.code_dim))

    def project_down(self, h: torch.Tensor) -> torch.Tensor:
        return self.down_proj(h)

    def level_codebook(self, level: int) -> torch.Tensor:
        """Entries of one level.  Residual levels pin entry 0 to the origin, so adding a
        level can never move the reconstruction further from its target."""
        cb = self.codebooks[level]
        if level == 0:
            return cb
        keep = torch.ones(cb.shape[0], 1, dtype=cb.dtype, device=cb.device)
        keep[0] = 0
        return cb * keep

    def quantize_residual(self, v: torch.Tensor):
        """Residually quantize low-dim vectors ``v`` [..., d].

        Returns codes [L, ...], per-level codewords and the residual each level saw.
        """
        residual = v
        codes, qs, residuals = [], [], []
        for level in range(self.num_levels):
            cb = self.level_codebook(level)
            idx, q = nearest_codeword(residual.detach(), cb.detach())
            # re-gather with grad so the codebook loss reaches the entries
            q = F.embedding(idx, cb)
            codes.append(idx)
            qs.append(q)
            residuals.append(residual)
            residual = residual - q.detach()
        if codes:
            codes = torch.stack(codes)
        else:
            codes = v.new_zeros((0,) + v.shape[:-1], dtype=torch.long)
        return codes, qs, residuals

    def forward(self, h: torch.Tensor) -> BranchOutput:
        if h.shape[-2] == 0:
            raise EmptyInputError("branch input has no frames")
        v = self.project_down(h)
        codes, qs, residuals = self.quantize_residual(v)
        zero = v.new_zeros(())
        commit, cb_loss = zero, zero
        for q, r in zip(qs, residuals):
            commit = commit + F.mse_loss(r, q.detach())
            cb_loss = cb_loss + F.mse_loss(q, r.detach())
        if qs:
            q_sum = torch.stack(qs).sum(0)
            z_low = v + (q_sum - v).detach()  # straight-through
            z = self.up_proj(z_low)
        else:
            z = torch.zeros_like(h)
        # codes: [L, B, T] -> [B, L, T]
        codes = codes.movedim(0, -2) if codes.ndim >= 2 else codes
        return BranchOutput(codes=codes, z=z, commit_loss=commit, codebook_loss=cb_loss, pre_quant=v)

    def embed(self, codes: torch.Tensor) -> torch.Tensor:
        """Map codes [..., L, T] back to post-quantization latents [..., T, D]."""
        if codes.shape[-2] != self.num_levels:
            raise ValidationError(f"{self.attribute} expects {self.num_levels} levels, got {codes.shape[-2]}")
        if self.num_levels == 0:
            return self.codebooks.new_zeros(codes.shape[:-2] + (codes.shape[-1], self.dim))
        if int(codes.min()) < 0 or int(codes.max()) >= self.codebook_size:
            raise ValidationError("code index out of range")
        q_sum = 0
        for level in range(self.num_levels):
            q_sum = q_sum + F.embedding(codes[..., level, :], self.level_codebook(level))
        return self.up_proj(q_sum)

    def encode_vectors(self, h: torch.Tensor, levels: int = 1) -> torch.Tensor:
        """Codes for arbitrary [..., D] vectors through the first ``levels`` codebooks."""
        v = self.project_down(h)
        codes = []
        for level in range(min(levels, self.num_levels)):
            idx, q = nearest_codeword(v, self.level_codebook(level))
            codes.append(idx)
            v = v - q
        return torch.stack(codes, dim=-1)
