"""FACodec network: encoder, timbre extractor, three FVQ branches, auxiliary heads, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .._validation import EmptyInputError, ValidationError, check_probability
from ..config import CodecConfig
from ..fvq import FVQBranch
from .layers import (
    AttentionPool,
    ConditionalLayerNorm,
    ConformerBlock,
    DecoderBlock,
    EncoderBlock,
    SnakeBeta,
    grl,
)

ATTRIBUTES = ("prosody", "content", "detail")


@dataclass
class CodecOutput:
    codes: dict                 # attribute -> LongTensor [B, levels, T]
    z_p: torch.Tensor           # [B, T, D]
    z_c: torch.Tensor
    z_d: torch.Tensor           # before detail dropout
    z_d_decoder: torch.Tensor   # what the decoder sees (zeros where dropped)
    detail_kept: torch.Tensor   # bool [B]
    h_t: torch.Tensor           # [B, D_t]
    aux_logits: dict = field(default_factory=dict)
    commit_loss: torch.Tensor | None = None
    codebook_loss: torch.Tensor | None = None
    pre_quant: dict = field(default_factory=dict)


def _classifier(dim: int, out: int) -> nn.Module:
    return nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, out))


class FACodecNetwork(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config.validate()
        ch = list(config.encoder_channels)
        dim, tdim = config.latent_dim, config.timbre_dim
        self.hop = config.hop

        self.enc_in = nn.Conv1d(1, ch[0], 7, padding=3)
        self.enc_blocks = nn.ModuleList(
            EncoderBlock(ch[i], ch[i + 1], s, config.residual_dilations) for i, s in enumerate(config.strides))
        self.enc_out = nn.Sequential(SnakeBeta(dim), nn.Conv1d(dim, dim, 3, padding=1))

        self.timbre_in = nn.Linear(dim, tdim)
        self.timbre_blocks = nn.ModuleList(
            ConformerBlock(tdim, config.timbre_heads) for _ in range(config.timbre_layers))
        self.timbre_pool = AttentionPool(tdim) if config.timbre_pool == "attention" else None

        kw = dict(codebook_size=config.codebook_size, codebook_dim=config.codebook_dim,
                  bottleneck=config.bottleneck)
        self.quantizers = nn.ModuleDict({
            "prosody": FVQBranch("prosody", dim, config.prosody_levels, **kw),
            "content": FVQBranch("content", dim, config.content_levels, **kw),
            "detail": FVQBranch("detail", dim, config.detail_levels, **kw),
        })

        n_ph, n_spk = config.num_phones, config.num_speakers
        self.f0_head = _classifier(dim, 1)
        self.phone_head = _classifier(dim, n_ph)
        self.speaker_head = _classifier(tdim, n_spk)
        self.gr_phone_from_prosody = _classifier(dim, n_ph)
        self.gr_f0_from_content = _classifier(dim, 1)
        self.gr_phone_from_detail = _classifier(dim, n_ph)
        self.gr_f0_from_detail = _classifier(dim, 1)
        self.gr_speaker_from_sum = _classifier(dim, n_spk)

        dch = [c * config.decoder_mult for c in reversed(ch)]
        self.dec_in_norm = ConditionalLayerNorm(dim, tdim)
        self.dec_in = nn.Conv1d(dim, dch[0], 7, padding=3)
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(dch[i], dch[i + 1], s, tdim, config.residual_dilations)
            for i, s in enumerate(reversed(config.strides)))
        self.dec_out = nn.Sequential(SnakeBeta(dch[-1]), nn.Conv1d(dch[-1], 1, 7, padding=3))

    def num_frames(self, num_samples: int) -> int:
        return -(-num_samples // self.hop)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """x: [B, S] waveform -> h: [B, T, D] with T = ceil(S / hop)."""
        if x.shape[-1] == 0:
            raise EmptyInputError("empty audio")
        frames = self.num_frames(x.shape[-1])
        pad = frames * self.hop - x.shape[-1]
        y = nn.functional.pad(x, (0, pad)).unsqueeze(1)
        y = self.enc_in(y)
        for block in self.enc_blocks:
            y = block(y)
        return self.enc_out(y).transpose(1, 2)

    def extract_timbre(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[1] == 0:
            raise EmptyInputError("no frames to extract timbre from")
        y = self.timbre_in(h)
        for block in self.timbre_blocks:
            y = block(y)
        if self.timbre_pool is None:
            return y.mean(1)
        return self.timbre_pool(y)

    def factorize(self, h: torch.Tensor, detail_dropout_p: float | None = None, training: bool = False,
                  generator: torch.Generator | None = None) -> CodecOutput:
        p = self.config.detail_dropout if detail_dropout_p is None else check_probability(
            detail_dropout_p, "detail_dropout_p")
        h_t = self.extract_timbre(h)
        outs = {name: self.quantizers[name](h) for name in ATTRIBUTES}
        z_p, z_c, z_d = (outs[n].z for n in ATTRIBUTES)

        batch = h.shape[0]
        if training:
            draws = torch.rand(batch, generator=generator)
            kept = ~(draws < p)
        else:
            kept = torch.ones(batch, dtype=torch.bool)
        z_d_dec = z_d * kept.to(z_d.dtype).view(-1, 1, 1)

        lam = self.config.grl_scale
        summed = (z_p + z_c + z_d).mean(1)  # speaker GRL sees the full sum, before dropout
        aux = {
            "f0": self.f0_head(z_p).squeeze(-1),
            "phone": self.phone_head(z_c),
            "speaker": self.speaker_head(h_t),
            "gr_phone_from_prosody": self.gr_phone_from_prosody(grl(z_p, lam)),
            "gr_f0_from_content": self.gr_f0_from_content(grl(z_c, lam)).squeeze(-1),
            "gr_phone_from_detail": self.gr_phone_from_detail(grl(z_d, lam)),
            "gr_f0_from_detail": self.gr_f0_from_detail(grl(z_d, lam)).squeeze(-1),
            "gr_speaker_from_sum": self.gr_speaker_from_sum(grl(summed, lam)),
        }
        return CodecOutput(
            codes={n: outs[n].codes for n in ATTRIBUTES},
            z_p=z_p, z_c=z_c, z_d=z_d, z_d_decoder=z_d_dec, detail_kept=kept, h_t=h_t,
            aux_logits=aux,
            commit_loss=sum(outs[n].commit_loss for n in ATTRIBUTES),
            codebook_loss=sum(outs[n].codebook_loss for n in ATTRIBUTES),
            pre_quant={n: outs[n].pre_quant for n in ATTRIBUTES},
        )

    def embed_codes(self, codes: dict):
        """Codes per attribute -> (z_p, z_c, z_d)."""
        return tuple(self.quantizers[n].embed(codes[n]) for n in ATTRIBUTES)

    def decode(self, z_p: torch.Tensor, z_c: torch.Tensor, z_d: torch.Tensor, h_t: torch.Tensor) -> torch.Tensor:
        """Latents [B, T, D] x3 and timbre [B, D_t] -> waveform [B, T * hop]."""
        if not (z_p.shape[:2] == z_c.shape[:2] == z_d.shape[:2]):
            raise ValidationError(
                f"frame counts differ: {tuple(z_p.shape)}, {tuple(z_c.shape)}, {tuple(z_d.shape)}")
        if h_t.shape[0] != z_p.shape[0]:
            raise ValidationError("timbre batch does not match latent batch")
        z = self.dec_in_norm(z_p + z_c + z_d, h_t)
        y = self.dec_in(z.transpose(1, 2))
        for block in self.dec_blocks:
            y = block(y, h_t)
        # centre over time before the tanh: the spectral losses cannot see a DC offset,
        # and an unconstrained one drifts into the saturated range
        y = self.dec_out(y).squeeze(1)
        return torch.tanh(y - y.mean(-1, keepdim=True))
