"""Mono RIFF/WAVE reading, writing and fixed-length segmentation."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    padded: int = field(default=0, compare=False)  # zero samples appended by segment()

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError("sample rate must be positive")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        yield cid, data[pos + 8:pos + 8 + size]
        pos += 8 + size + (size & 1)


def read_wav(path, expected_rate: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Load a mono PCM16 or float32 WAV; samples come back in [-1, 1].

    No resampling is done: a file at any other rate than ``expected_rate`` is
    rejected (pass ``None`` to accept any rate).
    """
    path = Path(path)
    if not path.exists():
        raise AudioError(f"missing file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file")
    fmt = payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise AudioError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _FMT_EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels != 1:
        raise AudioError(f"{path}: channel count ≠ 1 (got {channels})")
    if tag == _FMT_PCM and bits == 16:
        samples = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        samples = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported encoding (format {tag}, {bits} bits)")
    if expected_rate is not None and rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} ≠ configured {expected_rate}")
    if not np.all(np.isfinite(samples)):
        raise AudioError(f"{path}: non-finite samples")
    return Waveform(np.clip(samples, -1.0, 1.0), rate)


def _riff(fmt: bytes, payload: bytes) -> bytes:
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\0"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, w: Waveform) -> int:
    """Write PCM16 mono. Returns the number of samples clipped to [-1, 1]."""
    if len(w) < 1:
        raise AudioError("length ≥ 1 violated")
    x = w.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        log.warning("write_wav: clipped %d samples", clipped)
    q = np.clip(np.round(np.clip(x, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    fmt = struct.pack("<HHIIHH", _FMT_PCM, 1, w.sample_rate, w.sample_rate * 2, 2, 16)
    try:
        Path(path).write_bytes(_riff(fmt, q.tobytes()))
    except OSError as e:
        raise AudioError(f"cannot write {path}: {e}") from e
    return clipped


def write_wav_float(path, w: Waveform) -> None:
    """IEEE float32 mono; used by tests and for lossless intermediate files."""
    fmt = struct.pack("<HHIIHH", _FMT_FLOAT, 1, w.sample_rate, w.sample_rate * 4, 4, 32)
    Path(path).write_bytes(_riff(fmt, w.samples.astype("<f4").tobytes()))


def segment(w: Waveform, seg_len: int, hop: int, strict: bool = False) -> list[Waveform]:
    if seg_len < 1 or hop < 1:
        raise AudioError("seg_len and hop must be >= 1")
    t = len(w)
    if t < 1:
        raise AudioError("length ≥ 1 violated")
    if strict and seg_len > t:
        raise AudioError(f"segment length {seg_len} exceeds signal length {t}")
    n = math.ceil(max(t - seg_len, 0) / hop) + 1
    out = []
    for i in range(n):
        chunk = w.samples[i * hop:i * hop + seg_len]
        pad = seg_len - chunk.shape[0]
        if pad:
            chunk = np.concatenate([chunk, np.zeros(pad)])
        out.append(Waveform(chunk, w.sample_rate, padded=pad))
    return out
