"""Conditioning features: loudness, F0, sine excitation, mel-stack phonetics.

All frame-rate features share one :class:`FrameGrid` (center-padded frames,
``n_frames = T // hop + 1``) so they can be stacked and upsampled together.
Feature functions come in two layers: ``*_from_frames`` works on an already
framed block, which is what the streaming converter uses, and the public
wrappers frame a whole waveform first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio_io import DEFAULT_SAMPLE_RATE, Waveform

LOG_EPS = 1e-10
DEFAULT_HOP = 256
DEFAULT_FRAME = 1024
N_MELS = 40
RAMP_SECONDS = 0.010
MELSTACK_ID = "melstack-v1"


class DSPError(ValueError):
    pass


@dataclass(frozen=True)
class FrameGrid:
    frame_size: int = DEFAULT_FRAME
    hop: int = DEFAULT_HOP
    n_frames: int = 1
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.hop < 1 or self.frame_size < self.hop:
            raise DSPError(f"invalid grid: frame {self.frame_size}, hop {self.hop}")

    @classmethod
    def for_length(cls, n_samples: int, frame_size=DEFAULT_FRAME, hop=DEFAULT_HOP,
                   sample_rate=DEFAULT_SAMPLE_RATE) -> "FrameGrid":
        return cls(frame_size, hop, n_samples // hop + 1, sample_rate)

    @classmethod
    def for_waveform(cls, w: Waveform, frame_size=DEFAULT_FRAME, hop=DEFAULT_HOP) -> "FrameGrid":
        return cls.for_length(len(w), frame_size, hop, w.sample_rate)

    def with_frames(self, n_frames: int) -> "FrameGrid":
        return FrameGrid(self.frame_size, self.hop, n_frames, self.sample_rate)


@dataclass
class F0Track:
    f0_hz: np.ndarray
    confidence: np.ndarray
    grid: FrameGrid

    @property
    def voiced(self) -> np.ndarray:
        return self.f0_hz > 0

    @property
    def n_frames(self) -> int:
        return self.f0_hz.shape[0]


@dataclass
class LoudnessTrack:
    loud_db: np.ndarray
    grid: FrameGrid


@dataclass
class PhoneticFeatures:
    frames: np.ndarray  # (n_frames, D)
    grid: FrameGrid
    provider_id: str = MELSTACK_ID

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SpectralScaleSet:
    fft_sizes: tuple = (2048, 1024, 512, 256, 128, 64)

    def __post_init__(self):
        if not self.fft_sizes:
            raise DSPError("empty scale set")
        for m in self.fft_sizes:
            if m < 2 or m & (m - 1):
                raise DSPError(f"fft size {m} is not a power of two")

    def hop(self, m: int) -> int:
        return m // 4

    def __len__(self):
        return len(self.fft_sizes)

    def __iter__(self):
        return iter(self.fft_sizes)


# ------------------------------------------------------------------ framing

def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.where(idx < 0, -idx, idx)
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def frame_signal(x: np.ndarray, frame_size: int, hop: int, start: int = 0, stop: int | None = None,
                 total: int | None = None) -> np.ndarray:
    """Frames ``start..stop-1`` of the center reflect-padded signal.

    ``x`` may be a prefix of the full signal (streaming); ``total`` is the full
    length when known. Frames that would need samples beyond ``x`` or a
    reflection at an unknown end raise.
    """
    x = np.asarray(x)
    n = x.shape[0] if total is None else total
    pad = frame_size // 2
    if pad >= n:
        raise DSPError(f"frame of {frame_size} needs more than {pad} samples, signal has {n}")
    if stop is None:
        stop = n // hop + 1
    centers = np.arange(start, stop) * hop
    idx = _reflect(centers[:, None] - pad + np.arange(frame_size)[None, :], n)
    if idx.size and idx.max() >= x.shape[0]:
        raise DSPError("frame extends past available samples")
    return x[idx]


def _power_of_two(n: int) -> bool:
    return n >= 2 and not n & (n - 1)


@lru_cache(maxsize=16)
def _window(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(w: Waveform | np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Hann-windowed, center reflect-padded STFT magnitudes, shape (frames, bins)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if not _power_of_two(fft_size):
        raise DSPError(f"fft size {fft_size} is not a power of two")
    if hop < 1:
        raise DSPError("hop must be >= 1")
    if fft_size // 2 >= x.shape[0]:
        raise DSPError(f"fft size {fft_size} too large for {x.shape[0]} samples")
    frames = frame_signal(x, fft_size, hop)
    return np.abs(np.fft.rfft(frames * _window(fft_size), axis=1))


# ------------------------------------------------------------------ loudness

def a_weighting_db(f) -> np.ndarray:
    """IEC 61672 A-weighting curve in dB (0 dB at 1 kHz)."""
    f2 = np.asarray(f, dtype=np.float64) ** 2
    ra = (12194.0 ** 2 * f2 ** 2) / (
        (f2 + 20.6 ** 2) * np.sqrt((f2 + 107.7 ** 2) * (f2 + 737.9 ** 2)) * (f2 + 12194.0 ** 2))
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(ra) + 2.0


def a_weighting_power_gain(f) -> np.ndarray:
    return 10.0 ** (a_weighting_db(f) / 10.0)


def loudness_from_frames(frames: np.ndarray, sample_rate: int) -> np.ndarray:
    n = frames.shape[1]
    power = np.abs(np.fft.rfft(frames * _window(n), axis=1)) ** 2 / n
    gain = a_weighting_power_gain(np.fft.rfftfreq(n, 1.0 / sample_rate))
    return 10.0 * np.log10(power @ gain + LOG_EPS)


def a_weighted_loudness(w: Waveform, grid: FrameGrid) -> LoudnessTrack:
    frames = frame_signal(w.samples, grid.frame_size, grid.hop)
    return LoudnessTrack(loudness_from_frames(frames, w.sample_rate), grid.with_frames(frames.shape[0]))


# ------------------------------------------------------------------ pitch

def _check_f0_args(grid: FrameGrid, fmin: float, fmax: float, sample_rate: int):
    if not 0 < fmin < fmax < sample_rate / 2:
        raise DSPError(f"need 0 < fmin < fmax < sr/2, got {fmin}, {fmax}")
    if grid.frame_size < 2 * sample_rate / fmin:
        raise DSPError(f"frame size {grid.frame_size} too short for fmin {fmin} Hz")


def yin_from_frames(frames: np.ndarray, sample_rate: int, fmin: float, fmax: float,
                    threshold: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (f0_hz, confidence) by cumulative-mean-normalized difference."""
    n_frames, n = frames.shape
    tau_max = min(int(np.ceil(sample_rate / fmin)) + 1, n // 2)
    tau_min = max(int(np.floor(sample_rate / fmax)), 2)
    width = n - tau_max

    # difference function via FFT cross-correlation of the head with the frame
    nfft = 1 << int(np.ceil(np.log2(n + width)))
    head = frames[:, :width]
    xc = np.fft.irfft(np.conj(np.fft.rfft(head, nfft, axis=1)) * np.fft.rfft(frames, nfft, axis=1),
                      nfft, axis=1)[:, :tau_max + 1]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    e0 = sq[:, width][:, None]
    etau = sq[:, taus + width] - sq[:, taus]
    diff = np.maximum(e0 + etau - 2.0 * xc, 0.0)

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(cum > 0, diff[:, 1:] * taus[1:] / cum, 1.0)

    f0 = np.zeros(n_frames)
    conf = np.zeros(n_frames)
    energy = sq[:, -1] / n
    for i in range(n_frames):
        if energy[i] < 1e-10:
            continue
        d = cmnd[i]
        below = np.nonzero(d[tau_min:tau_max] < threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 < tau_max and d[tau + 1] < d[tau]:
            tau += 1
        a, b, c = d[tau - 1], d[tau], d[tau + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        f0[i] = np.clip(sample_rate / (tau + np.clip(shift, -1.0, 1.0)), fmin, fmax)
        conf[i] = np.clip(1.0 - b, 0.0, 1.0)
    return f0, conf


def estimate_f0(w: Waveform, grid: FrameGrid, fmin: float = 60.0, fmax: float = 1000.0,
                threshold: float = 0.15) -> F0Track:
    _check_f0_args(grid, fmin, fmax, w.sample_rate)
    frames = frame_signal(w.samples, grid.frame_size, grid.hop)
    f0, conf = yin_from_frames(frames, w.sample_rate, fmin, fmax, threshold)
    return F0Track(f0, conf, grid.with_frames(frames.shape[0]))


# ------------------------------------------------------------------ excitation

def _sample_frequency(f0_hz: np.ndarray, hop: int, start: int, stop: int, held: float) -> np.ndarray:
    """Per-sample frequency for samples [start, stop).

    Between two voiced frame centers the F0 is interpolated linearly; next to
    one voiced frame its value is used; between two unvoiced frames the last
    voiced F0 (``held`` before the block) is kept so phase keeps running.
    """
    t = np.arange(start, stop)
    i = t // hop
    frac = (t - i * hop) / hop
    n = f0_hz.shape[0]
    a = f0_hz[np.minimum(i, n - 1)]
    b = f0_hz[np.minimum(i + 1, n - 1)]
    f = np.where((a > 0) & (b > 0), a + (b - a) * frac, np.where(a > 0, a, b))
    voiced = f > 0
    if voiced.all():
        return f
    # forward fill unvoiced stretches
    idx = np.where(voiced, np.arange(f.shape[0]), -1)
    np.maximum.accumulate(idx, out=idx)
    return np.where(idx >= 0, f[np.maximum(idx, 0)], held)


def _sample_amplitude(voiced_frames: np.ndarray, hop: int, ramp: int, start: int, stop: int,
                      total: int) -> np.ndarray:
    """Voicing gate with linear ramps of ``ramp`` samples inside voiced spans."""
    lo, hi = max(start - ramp, 0), min(stop + ramp, total)
    t = np.arange(lo, hi)
    frame = np.minimum((t + hop // 2) // hop, voiced_frames.shape[0] - 1)
    mask = voiced_frames[frame]
    unv = t[~mask]
    tt = np.arange(start, stop)
    if unv.size == 0:
        return np.ones(stop - start)
    pos = np.searchsorted(unv, tt)
    left = np.where(pos > 0, tt - unv[np.maximum(pos - 1, 0)], np.iinfo(np.int64).max)
    right = np.where(pos < unv.size, unv[np.minimum(pos, unv.size - 1)] - tt, np.iinfo(np.int64).max)
    dist = np.minimum(left, right).astype(np.float64)
    return np.minimum(dist / ramp, 1.0) if ramp > 0 else (dist > 0).astype(np.float64)


def excitation_segment(f0_hz: np.ndarray, hop: int, sample_rate: int, start: int, stop: int,
                       total: int, phase: float = 0.0, held: float = 0.0):
    """Excitation samples [start, stop) of a ``total``-sample signal.

    Returns (samples, phase_after, held_after) so consecutive blocks chain into
    the same phase-continuous sinusoid as a single call.
    """
    f = _sample_frequency(f0_hz, hop, start, stop, held)
    a = _sample_amplitude(f0_hz > 0, hop, int(round(RAMP_SECONDS * sample_rate)), start, stop, total)
    phi = phase + np.cumsum(2.0 * np.pi * f / sample_rate)
    y = a * np.sin(phi)
    new_phase = float(phi[-1]) if phi.size else phase
    new_held = float(f[-1]) if f.size else held
    return y, new_phase, new_held


def synthesize_excitation(f0: F0Track, sample_rate: int | None = None, length: int | None = None) -> Waveform:
    """Single-sinusoid melody signal following the F0 track.

    Default length is ``n_frames * hop``, one hop-block per frame.
    """
    sr = sample_rate or f0.grid.sample_rate
    hop = f0.grid.hop
    total = f0.n_frames * hop if length is None else length
    y, _, _ = excitation_segment(f0.f0_hz, hop, sr, 0, total, total)
    return Waveform(y, sr)


# ------------------------------------------------------------------ phonetic stand-in

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int = N_MELS, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, fft_size: int = DEFAULT_FRAME,
                   sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Unit-peak triangular filters, shape (bins, n_mels)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    fb = np.zeros((freqs.shape[0], n_mels))
    for k in range(n_mels):
        lo, c, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[:, k] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_from_frames(frames: np.ndarray, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    n = frames.shape[1]
    power = np.abs(np.fft.rfft(frames * _window(n), axis=1)) ** 2
    return np.log(power @ mel_filterbank(n_mels, n, sample_rate) + LOG_EPS)


def phonetic_features(w: Waveform, grid: FrameGrid) -> PhoneticFeatures:
    frames = frame_signal(w.samples, grid.frame_size, grid.hop)
    return PhoneticFeatures(mel_from_frames(frames, w.sample_rate), grid.with_frames(frames.shape[0]))


# ------------------------------------------------------------------ SVCF files

SVCF_MAGIC = b"SVCF"
SVCF_VERSION = 1
KIND_PHONETIC, KIND_F0, KIND_LOUDNESS = 0, 1, 2
_HEADER = struct.Struct("<4sIIIIII")


class SVCFError(DSPError):
    pass


def write_features(path, track) -> None:
    if isinstance(track, PhoneticFeatures):
        kind, mat = KIND_PHONETIC, track.frames
    elif isinstance(track, F0Track):
        kind, mat = KIND_F0, np.stack([track.f0_hz, track.confidence], axis=1)
    elif isinstance(track, LoudnessTrack):
        kind, mat = KIND_LOUDNESS, track.loud_db[:, None]
    else:
        raise SVCFError(f"cannot serialize {type(track).__name__}")
    mat = np.ascontiguousarray(mat, dtype="<f4")
    g = track.grid
    header = _HEADER.pack(SVCF_MAGIC, SVCF_VERSION, kind, mat.shape[0], mat.shape[1], g.hop, g.sample_rate)
    Path(path).write_bytes(header + mat.tobytes())


def ingest_features(path, frame_size: int = DEFAULT_FRAME):
    """Parse an SVCF file into PhoneticFeatures, F0Track or LoudnessTrack."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != SVCF_MAGIC:
        raise SVCFError(f"{path}: bad magic")
    if len(data) < _HEADER.size:
        raise SVCFError(f"{path}: truncated header")
    _, version, kind, n_frames, dim, hop, sr = _HEADER.unpack_from(data, 0)
    if version != SVCF_VERSION:
        raise SVCFError(f"{path}: version mismatch (file {version}, expected {SVCF_VERSION})")
    need = n_frames * dim * 4
    payload = data[_HEADER.size:]
    if len(payload) < need:
        raise SVCFError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    mat = np.frombuffer(payload[:need], dtype="<f4").reshape(n_frames, dim).astype(np.float64)
    grid = FrameGrid(max(frame_size, hop), hop, n_frames, sr)
    if kind == KIND_PHONETIC:
        return PhoneticFeatures(mat, grid, provider_id="svcf")
    if kind == KIND_F0:
        if dim != 2:
            raise SVCFError(f"{path}: f0 file must have dim 2, got {dim}")
        return F0Track(mat[:, 0].copy(), mat[:, 1].copy(), grid)
    if kind == KIND_LOUDNESS:
        return LoudnessTrack(mat[:, 0].copy(), grid)
    raise SVCFError(f"{path}: unknown kind {kind}")
