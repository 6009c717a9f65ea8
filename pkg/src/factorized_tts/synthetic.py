"""Toy harmonic-plus-formant speech corpus with exact phoneme alignments.

Timbre is a per-speaker formant scale and spectral tilt, prosody is a
per-utterance F0 contour drawn from a range shared by every speaker, and
content is a phoneme-indexed formant trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AlignmentRecord, write_alignments, write_wav

# (F1, F2, F3) in Hz for voiced phones; None marks an unvoiced noise phone
_PHONE_TABLE = {
    "sil": None,
    "aa": (730, 1090, 2440),
    "iy": (270, 2290, 3010),
    "uw": (300, 870, 2240),
    "eh": (530, 1840, 2480),
    "ao": (570, 840, 2410),
    "ae": (660, 1720, 2410),
    "ih": (390, 1990, 2550),
    "ah": (520, 1190, 2390),
    "er": (490, 1350, 1690),
    "m": (250, 1200, 2200),
    "s": "noise_high",
    "f": "noise_flat",
}
PHONES = tuple(_PHONE_TABLE)
SILENCE = "sil"


@dataclass
class SyntheticSpec:
    num_speakers: int = 2
    utterances_per_speaker: int = 20
    seed: int = 0
    sample_rate: int = 16000
    hop: int = 200
    f0_range: tuple = (100.0, 220.0)
    phones_per_utterance: tuple = (8, 14)
    phone_frames: tuple = (4, 12)
    edge_silence_frames: tuple = (3, 6)
    formant_scale_range: tuple = (0.82, 1.2)
    tilt_range: tuple = (-9.0, -3.0)  # dB per octave above 500 Hz


def speaker_traits(spec: SyntheticSpec):
    """Deterministic (formant_scale, tilt) per speaker, spread across the configured ranges."""
    n = spec.num_speakers
    pos = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
    # interleave tilt so neighbouring speakers differ in both traits
    tilt_pos = pos[::-1] if n > 1 else pos
    lo, hi = spec.formant_scale_range
    tlo, thi = spec.tilt_range
    return [(lo + p * (hi - lo), tlo + q * (thi - tlo)) for p, q in zip(pos, tilt_pos)]


def _envelope(freqs, formants, scale, tilt_db):
    """Amplitude of a formant filter plus spectral tilt at ``freqs`` (any shape)."""
    amp = np.zeros_like(freqs)
    for i, f in enumerate(formants):
        centre = f * scale
        bw = 60.0 + 40.0 * i
        amp += (1.0 / (1 + i)) / (1.0 + ((freqs - centre) / bw) ** 2)
    octaves = np.log2(np.maximum(freqs, 500.0) / 500.0)
    return amp * 10 ** (tilt_db * octaves / 20.0)


def synthesize_utterance(phones, durations, f0_base, scale, tilt, rng, sample_rate=16000, hop=200):
    """Render one utterance; returns (samples float32, frame-level f0 in Hz with 0 for unvoiced)."""
    n_frames = int(np.sum(durations))
    n = n_frames * hop
    frame_phone = np.repeat(np.arange(len(phones)), durations)
    t_frames = np.arange(n_frames) * hop / sample_rate

    voiced_frame = np.array([_PHONE_TABLE[phones[i]] is not None and isinstance(_PHONE_TABLE[phones[i]], tuple)
                             for i in frame_phone])
    # slow contour: declination plus a random-phase wobble
    phase = rng.uniform(0, 2 * np.pi)
    rate = rng.uniform(1.5, 4.0)
    f0_frames = f0_base * (1.0 - 0.08 * t_frames / max(t_frames[-1], 1e-3)) \
        * (1.0 + 0.06 * np.sin(2 * np.pi * rate * t_frames + phase))

    sample_pos = (np.arange(n) + 0.5) / hop - 0.5
    f0 = np.interp(sample_pos, np.arange(n_frames), f0_frames)
    phase_acc = 2 * np.pi * np.cumsum(f0) / sample_rate

    # per-frame formant targets, smoothed across phone boundaries
    formants = np.zeros((n_frames, 3))
    for i, ph in enumerate(frame_phone):
        spec = _PHONE_TABLE[phones[ph]]
        formants[i] = spec if isinstance(spec, tuple) else (500, 1500, 2500)
    kernel = np.hanning(5)
    kernel /= kernel.sum()
    padded = np.pad(formants, ((2, 2), (0, 0)), mode="edge")
    formants = np.stack([np.convolve(padded[:, k], kernel, mode="valid") for k in range(3)], axis=1)

    nyq = sample_rate / 2
    n_harm = int(nyq // 60)
    k = np.arange(1, n_harm + 1)
    harm_freq = f0_frames[:, None] * k[None, :]                     # [F, H]
    amp = np.stack([_envelope(harm_freq[i], formants[i], scale, tilt) for i in range(n_frames)])
    amp[harm_freq >= nyq * 0.95] = 0.0
    amp *= voiced_frame[:, None]
    amp_s = np.empty((n, n_harm))
    for h in range(n_harm):
        amp_s[:, h] = np.interp(sample_pos, np.arange(n_frames), amp[:, h])
    voiced = (amp_s * np.sin(phase_acc[:, None] * k[None, :])).sum(1)

    # unvoiced phones: filtered noise, speaker tilt applied through the same envelope
    noise = np.zeros(n)
    noise_frames = np.array([isinstance(_PHONE_TABLE[phones[i]], str) for i in frame_phone])
    if noise_frames.any():
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        high = np.fft.irfft(spec * _envelope(freqs, (4500, 6000, 7000), scale, tilt), n)
        flat = np.fft.irfft(spec * _envelope(freqs, (1500, 3500, 5500), scale, tilt) * 0.5, n)
        gate_high = np.array([_PHONE_TABLE[phones[i]] == "noise_high" for i in frame_phone], dtype=float)
        gate_flat = np.array([_PHONE_TABLE[phones[i]] == "noise_flat" for i in frame_phone], dtype=float)
        noise = high * np.interp(sample_pos, np.arange(n_frames), gate_high) \
            + flat * np.interp(sample_pos, np.arange(n_frames), gate_flat)

    x = voiced + 3.0 * noise + 1e-3 * rng.standard_normal(n)
    x = 0.5 * x / max(np.abs(x).max(), 1e-8)
    return x.astype(np.float32), np.where(voiced_frame, f0_frames, 0.0)


def generate_corpus(spec: SyntheticSpec):
    """Yield (AlignmentRecord, samples, frame_f0) for every utterance, deterministically."""
    traits = speaker_traits(spec)
    content = [p for p in PHONES if p != SILENCE]
    for s, (scale, tilt) in enumerate(traits):
        for u in range(spec.utterances_per_speaker):
            rng = np.random.default_rng([spec.seed, s, u])
            n_ph = int(rng.integers(spec.phones_per_utterance[0], spec.phones_per_utterance[1] + 1))
            body = list(rng.choice(content, size=n_ph))
            phones = [SILENCE] + body + [SILENCE]
            lo, hi = spec.phone_frames
            durs = [int(rng.integers(*spec.edge_silence_frames, endpoint=True))]
            durs += [int(d) for d in rng.integers(lo, hi + 1, size=n_ph)]
            durs += [int(rng.integers(*spec.edge_silence_frames, endpoint=True))]
            f0_base = rng.uniform(*spec.f0_range)
            x, f0 = synthesize_utterance(phones, durs, f0_base, scale, tilt, rng, spec.sample_rate, spec.hop)
            rec = AlignmentRecord(utt_id=f"spk{s:02d}_{u:04d}", phonemes=phones, durations=durs,
                                  speaker=f"spk{s:02d}")
            yield rec, x, f0


def make_synthetic(out_dir, spec: SyntheticSpec | None = None):
    """Write ``wavs/*.wav``, ``alignments.jsonl``, ``phones.txt`` and ``spec.json`` under ``out_dir``.

    Returns the list of alignment records in utt_id order.
    """
    spec = spec or SyntheticSpec()
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    records = []
    for rec, x, _ in generate_corpus(spec):
        write_wav(out / "wavs" / f"{rec.utt_id}.wav", x, spec.sample_rate)
        records.append(rec)
    records.sort(key=lambda r: r.utt_id)
    write_alignments(out / "alignments.jsonl", records)
    (out / "phones.txt").write_text("\n".join(PHONES) + "\n")
    meta = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(spec).items()}
    (out / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return records
