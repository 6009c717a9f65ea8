"""Checkpoint files and the JSONL metrics log.

A checkpoint is an 8-byte magic ``FTTSCKPT``, a little-endian uint16 format
version, a uint16-length-prefixed ASCII ``kind`` tag (``codec`` or ``tts``),
then a ``torch.save`` payload of plain containers and tensors.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import torch

from .._validation import ValidationError

MAGIC = b"FTTSCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, payload: dict):
    buf = io.BytesIO()
    torch.save(payload, buf)
    tag = kind.encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<HH", FORMAT_VERSION, len(tag)) + tag)
        f.write(buf.getvalue())
    tmp.replace(path)


def read_header(path):
    with open(path, "rb") as f:
        head = f.read(len(MAGIC) + 4)
        if len(head) < len(MAGIC) + 4 or head[:len(MAGIC)] != MAGIC:
            raise ValidationError(f"{path} is not a checkpoint file")
        version, n = struct.unpack("<HH", head[len(MAGIC):])
        kind = f.read(n).decode("ascii")
    return version, kind


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    version, kind = read_header(path)
    if version > FORMAT_VERSION:
        raise ValidationError(f"checkpoint version {version} is newer than supported ({FORMAT_VERSION})")
    if expected_kind is not None and kind != expected_kind:
        raise ValidationError(f"expected a {expected_kind} checkpoint, got {kind}")
    with open(path, "rb") as f:
        f.seek(len(MAGIC) + 4 + len(kind))
        payload = torch.load(io.BytesIO(f.read()), map_location="cpu", weights_only=True)
    payload["_version"] = version
    payload["_kind"] = kind
    return payload


class MetricsLog:
    """Append-only JSONL of ``{"step", "term", "value"}`` records."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, step: int, values: dict):
        if self.path is None:
            return
        with open(self.path, "a") as f:
            for term, value in values.items():
                f.write(json.dumps({"step": int(step), "term": term, "value": float(value)}) + "\n")


def read_metrics(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
