"""Frame-level F0 via normalized autocorrelation, plus per-utterance z-scoring."""

import numpy as np


def estimate_f0(x: np.ndarray, sample_rate: int = 16000, hop: int = 200, fmin: float = 60.0,
                fmax: float = 450.0, window: int = 800, voicing_threshold: float = 0.45,
                silence_db: float = -45.0, octave_tolerance: float = 0.97) -> np.ndarray:
    """One F0 value (Hz) per hop; unvoiced frames are 0.

    Frame ``i`` is centred on sample ``i * hop + hop // 2`` so the output length
    is ``ceil(len(x) / hop)``, matching the codec's frame count.
    """
    x = np.asarray(x, dtype=np.float64)
    n_frames = -(-len(x) // hop)
    half = window // 2
    padded = np.pad(x, (half, half + n_frames * hop - len(x) + hop))
    centres = np.arange(n_frames) * hop + hop // 2 + half
    idx = centres[:, None] + np.arange(-half, half)[None, :]
    frames = padded[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)
    frames *= np.hanning(window)[None, :]

    lag_min = max(1, int(sample_rate / fmax))
    lag_max = min(window - 1, int(np.ceil(sample_rate / fmin)))
    spec = np.fft.rfft(frames, n=2 * window, axis=1)
    ac = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, :window]
    energy = ac[:, 0]
    # correct for the taper's own decay so longer lags are not penalized
    win_ac = np.correlate(np.hanning(window), np.hanning(window), mode="full")[window - 1:]
    norm = ac / np.maximum(energy[:, None], 1e-12) * (win_ac[0] / np.maximum(win_ac, 1e-12))[None, :]

    seg = norm[:, lag_min:lag_max + 1]
    # prefer the shortest lag whose local peak is near the global one (avoids octave-down errors)
    top = seg.max(axis=1, keepdims=True)
    local = np.zeros_like(seg, dtype=bool)
    local[:, 1:-1] = (seg[:, 1:-1] >= seg[:, :-2]) & (seg[:, 1:-1] >= seg[:, 2:])
    local[:, 0] = seg[:, 0] >= seg[:, 1]
    local[:, -1] = seg[:, -1] >= seg[:, -2]
    candidates = local & (seg >= octave_tolerance * top)
    best = np.where(candidates.any(axis=1), candidates.argmax(axis=1), seg.argmax(axis=1))
    peak = seg[np.arange(n_frames), best]
    lag = best + lag_min
    # parabolic interpolation around the peak
    frac = np.zeros(n_frames)
    inner = (best > 0) & (best < seg.shape[1] - 1)
    rows = np.nonzero(inner)[0]
    a = seg[rows, best[rows] - 1]
    b = seg[rows, best[rows]]
    c = seg[rows, best[rows] + 1]
    denom = a - 2 * b + c
    ok = np.abs(denom) > 1e-12
    frac[rows[ok]] = 0.5 * (a[ok] - c[ok]) / denom[ok]
    f0 = sample_rate / (lag + frac)

    rms_db = 10 * np.log10(np.maximum(energy / window, 1e-20))
    voiced = (peak > voicing_threshold) & (rms_db > silence_db)
    return np.where(voiced, f0, 0.0)


def normalize_f0(f0: np.ndarray):
    """Per-utterance z-score over voiced frames.

    Returns ``(z, voiced)``; unvoiced frames get z = 0 and are excluded from the statistics.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = f0 > 0
    z = np.zeros_like(f0)
    if voiced.sum() >= 2:
        mu = f0[voiced].mean()
        sd = f0[voiced].std()
        z[voiced] = (f0[voiced] - mu) / (sd if sd > 1e-8 else 1.0)
    return z, voiced
