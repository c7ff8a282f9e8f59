"""Utterance-level feature tracks and their conversion to generator input."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .audio_io import Waveform
from .dsp import F0Track, FrameGrid, LoudnessTrack, PhoneticFeatures
from .nets import FeatureBundle


@dataclass(frozen=True)
class FeatureConfig:
    frame_size: int = dsp.DEFAULT_FRAME
    hop: int = dsp.DEFAULT_HOP
    fmin: float = 60.0
    fmax: float = 1000.0
    yin_threshold: float = 0.15


@dataclass
class FeatureTracks:
    loudness: LoudnessTrack
    phonetic: PhoneticFeatures
    f0: F0Track

    @property
    def n_frames(self) -> int:
        return self.f0.n_frames

    def check(self) -> None:
        n = {self.loudness.loud_db.shape[0], self.phonetic.frames.shape[0], self.f0.n_frames}
        hops = {self.loudness.grid.hop, self.phonetic.grid.hop, self.f0.grid.hop}
        if len(n) != 1 or len(hops) != 1:
            raise dsp.DSPError(f"feature tracks disagree on grid: frames {sorted(n)}, hops {sorted(hops)}")


def extract_tracks(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FeatureTracks:
    grid = FrameGrid.for_waveform(w, cfg.frame_size, cfg.hop)
    frames = dsp.frame_signal(w.samples, cfg.frame_size, cfg.hop)
    return tracks_from_frames(frames, grid.with_frames(frames.shape[0]), cfg)


def tracks_from_frames(frames: np.ndarray, grid: FrameGrid, cfg: FeatureConfig) -> FeatureTracks:
    """All three tracks from one framed block (shared by offline and streaming paths)."""
    dsp._check_f0_args(grid, cfg.fmin, cfg.fmax, grid.sample_rate)
    sr = grid.sample_rate
    f0, conf = dsp.yin_from_frames(frames, sr, cfg.fmin, cfg.fmax, cfg.yin_threshold)
    return FeatureTracks(
        LoudnessTrack(dsp.loudness_from_frames(frames, sr), grid),
        PhoneticFeatures(dsp.mel_from_frames(frames, sr), grid),
        F0Track(f0, conf, grid),
    )


def silence_frames(n: int, grid: FrameGrid, n_mels: int = dsp.N_MELS) -> FeatureTracks:
    """Tracks for digital silence, used to pad past the end of an utterance."""
    g = grid.with_frames(n)
    return FeatureTracks(
        LoudnessTrack(np.full(n, 10.0 * np.log10(dsp.LOG_EPS)), g),
        PhoneticFeatures(np.full((n, n_mels), np.log(dsp.LOG_EPS)), g),
        F0Track(np.zeros(n), np.zeros(n), g),
    )


def slice_tracks(tr: FeatureTracks, start: int, n: int) -> FeatureTracks:
    """Frames [start, start+n), silence-padded past the end."""
    stop = min(start + n, tr.n_frames)
    g = tr.f0.grid.with_frames(n)
    loud = tr.loudness.loud_db[start:stop]
    phon = tr.phonetic.frames[start:stop]
    f0 = tr.f0.f0_hz[start:stop]
    conf = tr.f0.confidence[start:stop]
    missing = n - (stop - start)
    if missing > 0:
        pad = silence_frames(missing, g, tr.phonetic.frames.shape[1])
        loud = np.concatenate([loud, pad.loudness.loud_db])
        phon = np.concatenate([phon, pad.phonetic.frames])
        f0 = np.concatenate([f0, pad.f0.f0_hz])
        conf = np.concatenate([conf, pad.f0.confidence])
    return FeatureTracks(LoudnessTrack(loud, g), PhoneticFeatures(phon, g, tr.phonetic.provider_id),
                         F0Track(f0, conf, g))


def to_bundle(tr: FeatureTracks) -> FeatureBundle:
    hop = tr.f0.grid.hop
    exc = dsp.synthesize_excitation(tr.f0).samples
    return FeatureBundle.from_tracks(tr.loudness, tr.phonetic, exc, hop)


def feature_paths(feature_dir, stem: str) -> dict[str, Path]:
    d = Path(feature_dir)
    return {kind: d / f"{stem}.{kind}.svcf" for kind in ("phonetic", "f0", "loudness")}


def load_tracks(feature_dir, stem: str) -> FeatureTracks:
    p = feature_paths(feature_dir, stem)
    tr = FeatureTracks(dsp.ingest_features(p["loudness"]), dsp.ingest_features(p["phonetic"]),
                       dsp.ingest_features(p["f0"]))
    for got, want in ((tr.loudness, LoudnessTrack), (tr.phonetic, PhoneticFeatures), (tr.f0, F0Track)):
        if not isinstance(got, want):
            raise dsp.SVCFError(f"{stem}: expected {want.__name__}, file holds {type(got).__name__}")
    tr.check()
    return tr


def save_tracks(feature_dir, stem: str, tr: FeatureTracks) -> list[Path]:
    p = feature_paths(feature_dir, stem)
    Path(feature_dir).mkdir(parents=True, exist_ok=True)
    dsp.write_features(p["phonetic"], tr.phonetic)
    dsp.write_features(p["f0"], tr.f0)
    dsp.write_features(p["loudness"], tr.loudness)
    return list(p.values())
