"""Exceptions and input checks shared across the package."""

from __future__ import annotations

import numpy as np
import torch


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class EmptyInputError(ValidationError):
    pass


class ResampleRequiredError(ValidationError):
    """Audio arrived at a sample rate other than the model's; resample first."""


class OrderingError(RuntimeError):
    """An operation was requested out of its required order."""


class NumericError(FloatingPointError):
    """Non-finite values surfaced from a model; carries the step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class SynthesisError(RuntimeError):
    """A synthesis stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def check_finite(x, name: str = "input"):
    if isinstance(x, torch.Tensor):
        ok = bool(torch.isfinite(x).all())
    else:
        ok = bool(np.all(np.isfinite(np.asarray(x, dtype=np.float64))))
    if not ok:
        raise ValidationError(f"{name} contains non-finite values")
    return x


def check_probability(p: float, name: str = "p") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0 or np.isnan(p):
        raise ValidationError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_waveform(samples, sample_rate: int, expected_rate: int = 16000) -> np.ndarray:
    """Validate a mono waveform and return it as float32 in [-1, 1]."""
    if sample_rate != expected_rate:
        raise ResampleRequiredError(
            f"expected {expected_rate} Hz audio, got {sample_rate} Hz; resample before encoding"
        )
    x = np.asarray(samples)
    if x.ndim != 1:
        raise ValidationError(f"waveform must be 1-D (mono), got shape {x.shape}")
    if x.size == 0:
        raise EmptyInputError("waveform is empty")
    x = x.astype(np.float32, copy=False)
    check_finite(x, "waveform")
    return np.clip(x, -1.0, 1.0)


def check_tokens(tokens, vocab_size: int, name: str = "tokens") -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= vocab_size):
        raise ValidationError(f"{name} must lie in [0, {vocab_size})")
    return t


def check_durations(durations, max_value: int | None = None) -> np.ndarray:
    raw = durations.numpy() if isinstance(durations, torch.Tensor) else np.asarray(durations)
    if raw.size and raw.dtype.kind == "f" and not np.array_equal(raw, np.round(raw)):
        raise ValidationError("durations must be whole frame counts")
    d = raw.astype(np.int64)
    if d.ndim != 1:
        raise ValidationError("durations must be a 1-D integer sequence")
    if (d < 0).any():
        raise ValidationError("durations must be non-negative")
    if max_value is not None and (d > max_value).any():
        raise ValidationError(f"durations must not exceed {max_value}")
    return d
