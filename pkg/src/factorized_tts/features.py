"""Mel filterbanks and log-mel spectrograms (torch) shared by losses and metrics."""

from __future__ import annotations

import functools

import numpy as np
import torch


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=32)
def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int = 16000, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters, shape [n_mels, n_fft // 2 + 1], unit peak."""
    fmax = sample_rate / 2 if fmax is None else fmax
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / np.maximum(mid - lo, 1e-9)
    down = (hi - bins[None, :]) / np.maximum(hi - mid, 1e-9)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def stft_magnitude(x: torch.Tensor, n_fft: int, hop: int | None = None) -> torch.Tensor:
    """|STFT| with a Hann window; x [B, S] -> [B, n_fft//2+1, frames]."""
    hop = hop or n_fft // 4
    window = torch.hann_window(n_fft, dtype=x.dtype, device=x.device)
    spec = torch.stft(x, n_fft, hop_length=hop, win_length=n_fft, window=window, center=True,
                      pad_mode="reflect" if x.shape[-1] > n_fft // 2 else "constant", return_complex=True)
    return spec.abs()


def log_mel(x: torch.Tensor, n_fft: int, n_mels: int, hop: int | None = None, sample_rate: int = 16000,
            eps: float = 1e-5) -> torch.Tensor:
    """Natural-log mel magnitude spectrogram, [B, n_mels, frames]."""
    mag = stft_magnitude(x, n_fft, hop)
    fb = torch.tensor(mel_filterbank(n_fft, n_mels, sample_rate), dtype=x.dtype, device=x.device)
    return torch.log(torch.clamp(fb @ mag, min=eps))
