"""Per-utterance attribute codes and their JSON Lines export format.

One JSON object per line::

    {"format": "factorized-tts-codes", "version": 1, "utt_id": "...", "T": 160,
     "prosody": [[...]], "content": [[...], [...]], "detail": [[...], [...], [...]],
     "h_t": [...], "h_t_dtype": "float32"}

Code grids are ``levels x T`` integer lists.  ``h_t`` is written as the exact
decimal expansion of each float (Python's shortest round-trip repr of the
value widened to float64), so reading it back reproduces the original bits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ValidationError

FORMAT = "factorized-tts-codes"
VERSION = 1
ATTRIBUTES = ("prosody", "content", "detail")


@dataclass
class UtteranceCodes:
    utt_id: str
    prosody: np.ndarray          # [1, T] int64
    content: np.ndarray          # [2, T]
    detail: np.ndarray           # [3, T]
    h_t: np.ndarray              # [D_t] float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ATTRIBUTES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
            if getattr(self, name).ndim != 2:
                raise ValidationError(f"{name} codes must be levels x T")
        self.h_t = np.asarray(self.h_t, dtype=np.float32)
        lengths = {getattr(self, n).shape[1] for n in ATTRIBUTES}
        if len(lengths) != 1:
            raise ValidationError(f"attribute grids disagree on T: {sorted(lengths)}")

    @property
    def num_frames(self) -> int:
        return int(self.prosody.shape[1])

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in ATTRIBUTES}

    def to_json(self) -> str:
        obj = {"format": FORMAT, "version": VERSION, "utt_id": self.utt_id, "T": self.num_frames}
        for n in ATTRIBUTES:
            obj[n] = getattr(self, n).tolist()
        obj["h_t"] = [float(v) for v in self.h_t.astype(np.float64)]
        obj["h_t_dtype"] = "float32"
        if self.meta:
            obj["meta"] = self.meta
        return json.dumps(obj)

    @classmethod
    def from_json(cls, line: str) -> "UtteranceCodes":
        obj = json.loads(line)
        if obj.get("format") != FORMAT:
            raise ValidationError("not a code record")
        if int(obj.get("version", 0)) > VERSION:
            raise ValidationError(f"code record version {obj['version']} is newer than supported")
        rec = cls(utt_id=obj["utt_id"], prosody=obj["prosody"], content=obj["content"], detail=obj["detail"],
                  h_t=np.asarray(obj["h_t"], dtype=np.float64).astype(obj.get("h_t_dtype", "float32")),
                  meta=obj.get("meta", {}))
        if rec.num_frames != int(obj["T"]):
            raise ValidationError(f"{rec.utt_id}: T={obj['T']} but grids have {rec.num_frames} frames")
        return rec

    def equals(self, other: "UtteranceCodes") -> bool:
        return (self.utt_id == other.utt_id
                and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in ATTRIBUTES)
                and self.h_t.dtype == other.h_t.dtype
                and self.h_t.tobytes() == other.h_t.tobytes())


def write_codes(path, records):
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_codes(path) -> list:
    return [UtteranceCodes.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
