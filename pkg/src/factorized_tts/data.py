"""Alignment records, WAV IO and dataset ingestion.

Alignment file: one JSON object per line::

    {"utt_id": "spk00_0001", "phonemes": ["sil", "aa", ...], "durations": [4, 7, ...], "speaker": "spk00"}

``durations`` are frame counts at the codec hop (200 samples).  ``phonemes``
may be symbols (resolved through a vocabulary file, one symbol per line, line
number = id) or integer ids.  ``speaker`` is optional; when absent the
utt_id prefix before the first ``_`` is used.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from ._validation import ValidationError, check_durations, check_waveform

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
HOP = 200


@dataclass
class AlignmentRecord:
    utt_id: str
    phonemes: list
    durations: list
    speaker: str | None = None

    def __post_init__(self):
        if len(self.phonemes) != len(self.durations):
            raise ValidationError(f"{self.utt_id}: {len(self.phonemes)} phonemes vs {len(self.durations)} durations")
        check_durations(self.durations)

    @property
    def num_frames(self) -> int:
        return int(sum(self.durations))

    def speaker_label(self) -> str:
        return self.speaker if self.speaker is not None else self.utt_id.split("_", 1)[0]

    def to_json(self) -> str:
        obj = {"utt_id": self.utt_id, "phonemes": list(self.phonemes), "durations": [int(d) for d in self.durations]}
        if self.speaker is not None:
            obj["speaker"] = self.speaker
        return json.dumps(obj, sort_keys=True)


def read_alignments(path) -> list:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(AlignmentRecord(utt_id=str(obj["utt_id"]), phonemes=list(obj["phonemes"]),
                                           durations=[int(d) for d in obj["durations"]],
                                           speaker=obj.get("speaker")))
        except (KeyError, TypeError, json.JSONDecodeError) as err:
            raise ValidationError(f"{path}:{lineno}: malformed alignment record ({err})") from err
    return records


def write_alignments(path, records):
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


class PhoneVocab:
    """Symbol <-> id mapping; line order of the vocabulary file defines ids."""

    def __init__(self, symbols, silence: str = "sil"):
        self.symbols = list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValidationError("duplicate phoneme symbols in vocabulary")
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.silence_id = self.index.get(silence, 0)

    @classmethod
    def from_file(cls, path, silence: str = "sil"):
        return cls([s.strip() for s in Path(path).read_text().splitlines() if s.strip()], silence)

    def __len__(self):
        return len(self.symbols)

    def encode(self, phonemes) -> np.ndarray:
        ids = []
        for p in phonemes:
            if isinstance(p, (int, np.integer)):
                if not 0 <= p < len(self):
                    raise ValidationError(f"phoneme id {p} outside vocabulary of {len(self)}")
                ids.append(int(p))
            elif p in self.index:
                ids.append(self.index[p])
            else:
                raise ValidationError(f"unknown phoneme {p!r}")
        return np.asarray(ids, dtype=np.int64)


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono WAV as float32 in [-1, 1]; rejects other sample rates."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float32) - 128.0) / 128.0
    else:
        x = data.astype(np.float32)
    return check_waveform(x, rate, expected_rate)


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE):
    """Write PCM16 mono."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, pcm)


def reconcile_durations(durations, num_frames: int, silence_id: int, phone_ids):
    """Apply the +-1 frame tolerance.

    Returns ``(phone_ids, durations)`` adjusted to sum to ``num_frames``, or None
    when the mismatch is larger than one frame.
    """
    d = list(int(v) for v in durations)
    ids = list(int(v) for v in phone_ids)
    diff = sum(d) - num_frames
    if diff == 0:
        return ids, d
    if abs(diff) > 1:
        return None
    if diff == 1:
        # trim the excess frame from the last phoneme that has one
        for i in range(len(d) - 1, -1, -1):
            if d[i] > 0:
                d[i] -= 1
                break
    else:
        ids.append(silence_id)
        d.append(1)
    return ids, d


@dataclass
class Utterance:
    utt_id: str
    audio: np.ndarray
    phone_ids: np.ndarray
    durations: np.ndarray
    speaker: str
    speaker_id: int = 0
    f0: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_frames(self) -> int:
        return int(self.durations.sum())

    def frame_phones(self) -> np.ndarray:
        return np.repeat(self.phone_ids, self.durations)


class Dataset:
    """Validated utterances in utt_id order, with a stable speaker index."""

    def __init__(self, utterances, skipped=(), vocab: PhoneVocab | None = None):
        self.utterances = sorted(utterances, key=lambda u: u.utt_id)
        self.skipped = list(skipped)
        self.vocab = vocab
        self.speakers = sorted({u.speaker for u in self.utterances})
        sid = {s: i for i, s in enumerate(self.speakers)}
        for u in self.utterances:
            u.speaker_id = sid[u.speaker]

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    def __iter__(self):
        return iter(self.utterances)

    def by_id(self, utt_id: str) -> Utterance:
        for u in self.utterances:
            if u.utt_id == utt_id:
                return u
        raise KeyError(utt_id)

    @property
    def skip_fraction(self) -> float:
        total = len(self.utterances) + len(self.skipped)
        return len(self.skipped) / total if total else 0.0


def ingest(audio_dir, alignment_file, vocab=None, hop: int = HOP, sample_rate: int = SAMPLE_RATE) -> Dataset:
    """Load ``<audio_dir>/<utt_id>.wav`` for every alignment record.

    Unreadable audio and duration mismatches beyond one frame are skipped with a
    warning; the skipped utt_ids are kept on ``Dataset.skipped``.
    """
    audio_dir = Path(audio_dir)
    records = read_alignments(alignment_file)
    if vocab is None:
        vocab_path = Path(alignment_file).with_name("phones.txt")
        vocab = PhoneVocab.from_file(vocab_path) if vocab_path.exists() else None
    elif not isinstance(vocab, PhoneVocab):
        vocab = PhoneVocab.from_file(vocab)
    utts, skipped = [], []
    for rec in sorted(records, key=lambda r: r.utt_id):
        path = audio_dir / f"{rec.utt_id}.wav"
        try:
            audio = read_wav(path, sample_rate)
        except (OSError, ValueError) as err:
            log.warning("skipping %s: unreadable audio (%s)", rec.utt_id, err)
            skipped.append(rec.utt_id)
            continue
        if vocab is not None:
            ids = vocab.encode(rec.phonemes)
            silence = vocab.silence_id
        else:
            try:
                ids = np.asarray([int(p) for p in rec.phonemes], dtype=np.int64)
            except (TypeError, ValueError):
                raise ValidationError("symbolic phonemes need a vocabulary file") from None
            silence = 0
        frames = math.ceil(len(audio) / hop)
        fixed = reconcile_durations(rec.durations, frames, silence, ids)
        if fixed is None:
            log.warning("skipping %s: durations sum to %d, audio has %d frames",
                        rec.utt_id, rec.num_frames, frames)
            skipped.append(rec.utt_id)
            continue
        ids, durs = fixed
        utts.append(Utterance(rec.utt_id, audio, np.asarray(ids, dtype=np.int64),
                              np.asarray(durs, dtype=np.int64), rec.speaker_label()))
    return Dataset(utts, skipped, vocab)


def export_alignments(path, dataset: Dataset):
    """Write a dataset's (possibly reconciled) alignments back out."""
    vocab = dataset.vocab
    records = []
    for u in dataset:
        phones = [vocab.symbols[i] for i in u.phone_ids] if vocab is not None else [int(i) for i in u.phone_ids]
        records.append(AlignmentRecord(u.utt_id, phones, [int(d) for d in u.durations], u.speaker))
    write_alignments(path, records)
