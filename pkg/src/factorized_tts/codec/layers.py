import math

import torch
import torch.nn.functional as F
from torch import nn

from .._validation import ValidationError


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def grl(v: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass, multiplies gradients by ``-scale`` on the way back."""
    if scale < 0:
        raise ValidationError("gradient reversal scale must be non-negative")
    return _GradReverse.apply(v, float(scale))


class GradientReversal(nn.Module):
    def __init__(self, scale: float = 1.0):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return grl(x, self.scale)


class _SnakeBetaFn(torch.autograd.Function):
    # hand-written backward: the autograd graph of the plain expression keeps
    # several full-size intermediates alive and dominates CPU time
    @staticmethod
    def forward(ctx, x, log_alpha, log_beta):
        alpha = log_alpha.exp()
        inv_beta = 1.0 / (log_beta.exp() + 1e-9)
        ax = alpha * x
        s = torch.sin(ax)
        ctx.save_for_backward(x, ax, alpha, inv_beta)
        return torch.addcmul(x, s * s, inv_beta.expand_as(s))

    @staticmethod
    def backward(ctx, grad):
        x, ax, alpha, inv_beta = ctx.saved_tensors
        s2 = torch.sin(2 * ax)
        g_s2 = grad * s2
        grad_x = grad + g_s2 * (alpha * inv_beta)
        grad_log_alpha = (g_s2 * x).sum((0, 2), keepdim=True) * inv_beta * alpha
        sin_sq = 0.5 * (1 - torch.cos(2 * ax))
        beta = 1.0 / inv_beta - 1e-9
        grad_log_beta = -(grad * sin_sq).sum((0, 2), keepdim=True) * inv_beta * inv_beta * beta
        return grad_x, grad_log_alpha, grad_log_beta


class SnakeBeta(nn.Module):
    """x + 1/beta * sin^2(alpha * x), with per-channel log-scale alpha and beta."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.zeros(1, channels, 1))
        self.log_beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        return _SnakeBetaFn.apply(x, self.log_alpha, self.log_beta)


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, dilation: int = 1, kernel_size: int = 7):
        super().__init__()
        pad = (kernel_size - 1) * dilation // 2
        self.block = nn.Sequential(
            SnakeBeta(channels),
            nn.Conv1d(channels, channels, kernel_size, dilation=dilation, padding=pad),
            SnakeBeta(channels),
            nn.Conv1d(channels, channels, 1),
        )

    def forward(self, x):
        return x + self.block(x)


class EncoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, dilations=(1, 3)):
        super().__init__()
        self.units = nn.Sequential(*[ResidualUnit(in_channels, d) for d in dilations])
        self.act = SnakeBeta(in_channels)
        # kernel == stride keeps the frame count exactly len / stride
        self.down = nn.Conv1d(in_channels, out_channels, kernel_size=stride, stride=stride)

    def forward(self, x):
        return self.down(self.act(self.units(x)))


class ConditionalLayerNorm(nn.Module):
    """Layer norm over channels whose scale and shift are predicted from a global vector."""

    def __init__(self, channels: int, cond_dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = nn.Linear(cond_dim, channels)
        self.shift = nn.Linear(cond_dim, channels)
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x, cond, channel_dim: int = -1):
        """x: [B, T, C] (channel_dim=-1) or [B, C, T] (channel_dim=1); cond: [B, cond_dim]."""
        if channel_dim != -1:
            x = x.transpose(1, 2)
        x = F.layer_norm(x, x.shape[-1:], eps=self.eps)
        x = x * self.scale(cond).unsqueeze(1) + self.shift(cond).unsqueeze(1)
        if channel_dim != -1:
            x = x.transpose(1, 2)
        return x


class DecoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, cond_dim: int, dilations=(1, 3)):
        super().__init__()
        self.act = SnakeBeta(in_channels)
        # output length is exactly len * stride: (L-1)s - 2p + 2s + (2p - s)
        pad = -(-stride // 2)
        self.up = nn.ConvTranspose1d(in_channels, out_channels, kernel_size=2 * stride, stride=stride,
                                     padding=pad, output_padding=2 * pad - stride)
        self.units = nn.Sequential(*[ResidualUnit(out_channels, d) for d in dilations])
        self.norm = ConditionalLayerNorm(out_channels, cond_dim)

    def forward(self, x, cond):
        x = self.up(self.act(x))
        x = self.units(x)
        return self.norm(x, cond, channel_dim=1)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * mult),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    """Conformer convolution module.  Replicate padding keeps constant inputs constant."""

    def __init__(self, dim: int, kernel_size: int = 7):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2,
                                   groups=dim, padding_mode="replicate")
        self.act = nn.SiLU()
        self.pointwise_out = nn.Conv1d(dim, dim, 1)

    def forward(self, x):
        y = self.norm(x).transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        y = self.act(self.depthwise(y))
        return self.pointwise_out(y).transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 4, kernel_size: int = 7, dropout: float = 0.0):
        super().__init__()
        self.ff1 = FeedForward(dim, dropout=dropout)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.conv = ConvModule(dim, kernel_size)
        self.ff2 = FeedForward(dim, dropout=dropout)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        y = self.attn_norm(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class AttentionPool(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.score = nn.Linear(dim, 1)

    def forward(self, x):
        w = torch.softmax(self.score(x), dim=1)
        return (w * x).sum(1)


def sinusoidal_embedding(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of real-valued positions or times; values [...] -> [..., dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = values.float().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
