"""Objective reconstruction metrics and the (disabled) external scoring client."""

from __future__ import annotations

import json
import math
import urllib.request
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import dct

from ._validation import ValidationError
from .codec.pitch import estimate_f0, normalize_f0
from .features import mel_filterbank
from .fvq import codebook_perplexity

MCD_FFT = 1024
MCD_HOP = 200
MCD_MELS = 40
MCD_ORDER = 13
MSTFT_SIZES = (512, 1024, 2048)
_EPS = 1e-10


def _frames(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centre-padded Hann-windowed frames [F, n_fft]."""
    x = np.pad(np.asarray(x, dtype=np.float64), (n_fft // 2, n_fft // 2))
    n = 1 + max(0, (len(x) - n_fft) // hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n)[:, None]
    return x[idx] * np.hanning(n_fft + 1)[:-1][None, :]


def magnitude(x, n_fft: int, hop: int) -> np.ndarray:
    return np.abs(np.fft.rfft(_frames(x, n_fft, hop), axis=1))


def mel_cepstrum(x, n_fft: int = MCD_FFT, hop: int = MCD_HOP, n_mels: int = MCD_MELS,
                 sample_rate: int = 16000) -> np.ndarray:
    """DCT-II (orthonormal) of log mel power; [frames, n_mels]."""
    power = magnitude(x, n_fft, hop) ** 2
    mel = power @ mel_filterbank(n_fft, n_mels, sample_rate).T
    return dct(np.log(mel + _EPS), type=2, norm="ortho", axis=1)


def _align(a: np.ndarray, b: np.ndarray):
    n = min(len(a), len(b))
    if n == 0:
        raise ValidationError("cannot compare empty signals")
    return np.asarray(a[:n], dtype=np.float64), np.asarray(b[:n], dtype=np.float64)


def mel_cepstral_distortion(ref, est, order: int = MCD_ORDER, sample_rate: int = 16000) -> float:
    """Frame-averaged MCD in dB over coefficients 1..order (0th excluded).

    Signals of unequal length are truncated to the shorter one.
    """
    ref, est = _align(ref, est)
    c_ref = mel_cepstrum(ref, sample_rate=sample_rate)[:, 1:order + 1]
    c_est = mel_cepstrum(est, sample_rate=sample_rate)[:, 1:order + 1]
    per_frame = (10.0 / math.log(10.0)) * np.sqrt(2.0 * ((c_ref - c_est) ** 2).sum(axis=1))
    return float(per_frame.mean())


def multi_resolution_stft_distance(ref, est, sizes=MSTFT_SIZES) -> float:
    """Mean over FFT sizes of spectral convergence plus mean absolute log-magnitude difference."""
    ref, est = _align(ref, est)
    total = 0.0
    for n_fft in sizes:
        m_ref = magnitude(ref, n_fft, n_fft // 4)
        m_est = magnitude(est, n_fft, n_fft // 4)
        sc = np.linalg.norm(m_ref - m_est) / max(np.linalg.norm(m_ref), _EPS)
        mag = np.mean(np.abs(np.log(m_ref + 1e-7) - np.log(m_est + 1e-7)))
        total += sc + mag
    return float(total / len(sizes))


def f0_zscore_mae(ref, est, hop: int = 200) -> float:
    """Mean |z_ref - z_est| over frames voiced in both signals (NaN if none)."""
    ref, est = _align(ref, est)
    z_r, v_r = normalize_f0(estimate_f0(ref, hop=hop))
    z_e, v_e = normalize_f0(estimate_f0(est, hop=hop))
    both = v_r & v_e
    return float(np.abs(z_r[both] - z_e[both]).mean()) if both.any() else float("nan")


@dataclass
class MetricReport:
    mcd: float
    mstft: float
    f0_mae: float
    perplexity: dict = field(default_factory=dict)
    speaker_accuracy: float = float("nan")
    num_utterances: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def eval_reconstruction(codec, dataset) -> MetricReport:
    """Reconstruct every utterance through the codes and average the metrics."""
    if dataset is None or len(dataset) == 0:
        raise ValidationError("empty dataset")
    mcds, stfts, f0s, hits = [], [], [], []
    used = {"prosody": [], "content": [], "detail": []}
    names = list(getattr(codec, "speakers_", []) or [])
    for u in dataset:
        codes = codec.encode_codes(u.audio, u.utt_id)
        y = codec.decode_codes(codes)
        mcds.append(mel_cepstral_distortion(u.audio, y))
        stfts.append(multi_resolution_stft_distance(u.audio, y))
        f0s.append(f0_zscore_mae(u.audio, y))
        for name in used:
            used[name].append(getattr(codes, name).ravel())
        if names and u.speaker in names:
            hits.append(codec.predict_speaker(y) == names.index(u.speaker))
    k = codec.network_.config.codebook_size
    perp = {n: codebook_perplexity(np.concatenate(v), k) for n, v in used.items()}
    finite_f0 = [v for v in f0s if not math.isnan(v)]
    return MetricReport(
        mcd=float(np.mean(mcds)), mstft=float(np.mean(stfts)),
        f0_mae=float(np.mean(finite_f0)) if finite_f0 else float("nan"),
        perplexity=perp, speaker_accuracy=float(np.mean(hits)) if hits else float("nan"),
        num_utterances=len(dataset))


class ExternalScorer:
    """Client for an optional local scoring service (speaker similarity, WER).

    Request: ``POST {endpoint}/score`` with JSON
    ``{"metric": "sim" | "wer", "reference": <wav path>, "hypothesis": <wav path>, "text": <str|null>}``.
    Response: ``{"metric": ..., "value": <float>}``.  Disabled unless an endpoint is given.
    """

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    @property
    def enabled(self) -> bool:
        return bool(self.endpoint)

    def score(self, metric: str, reference: str, hypothesis: str, text: str | None = None) -> float:
        if not self.enabled:
            raise RuntimeError("external scoring is disabled; pass an endpoint to enable it")
        body = json.dumps({"metric": metric, "reference": reference, "hypothesis": hypothesis,
                           "text": text}).encode()
        req = urllib.request.Request(self.endpoint.rstrip("/") + "/score", data=body,
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return float(json.loads(resp.read())["value"])
