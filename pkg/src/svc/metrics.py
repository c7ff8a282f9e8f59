"""Voicing Decision Error and F0 Frame Error."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .audio_io import Waveform
from .dsp import F0Track, FrameGrid, estimate_f0
from .features import FeatureConfig

log = logging.getLogger(__name__)

FFE_TOLERANCE = 0.2


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    vde: float
    ffe: float
    n_frames: int


def _aligned(ref: F0Track, hyp: F0Track):
    a, b = ref.f0_hz, hyp.f0_hz
    if a.shape[0] != b.shape[0]:
        n = min(a.shape[0], b.shape[0])
        log.warning("frame counts differ (%d vs %d); trimming to %d", a.shape[0], b.shape[0], n)
        a, b = a[:n], b[:n]
    if a.shape[0] == 0:
        raise MetricError("zero frames")
    return a, b


def vde(ref: F0Track, hyp: F0Track) -> float:
    a, b = _aligned(ref, hyp)
    return float(np.count_nonzero((a > 0) != (b > 0))) / a.shape[0]


def ffe(ref: F0Track, hyp: F0Track) -> float:
    """Fraction of frames with a voicing error or > 20% deviation from the reference F0."""
    a, b = _aligned(ref, hyp)
    if np.any(~np.isfinite(a)) or np.any(a < 0):
        raise MetricError("reference F0 track holds invalid values")
    voicing = (a > 0) != (b > 0)
    both = (a > 0) & (b > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = np.where(both, np.abs(b - a) / np.where(both, a, 1.0), 0.0)
    gross = both & (dev > FFE_TOLERANCE)
    return float(np.count_nonzero(voicing | gross)) / a.shape[0]


def evaluate_tracks(ref: F0Track, hyp: F0Track) -> MetricReport:
    a, _ = _aligned(ref, hyp)
    return MetricReport(vde(ref, hyp), ffe(ref, hyp), a.shape[0])


def evaluate_waveforms(ref: Waveform, hyp: Waveform, cfg: FeatureConfig = FeatureConfig()) -> MetricReport:
    """Both signals go through the same pitch tracker, so its bias largely cancels."""
    tracks = []
    for w in (ref, hyp):
        grid = FrameGrid.for_waveform(w, cfg.frame_size, cfg.hop)
        tracks.append(estimate_f0(w, grid, cfg.fmin, cfg.fmax, cfg.yin_threshold))
    return evaluate_tracks(*tracks)
