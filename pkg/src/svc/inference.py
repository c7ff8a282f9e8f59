"""Offline and chunked (streaming) conversion with a trained model.

Both paths evaluate the network through :meth:`Converter.render_frames`, and
noise comes from a counter-based generator indexed by absolute sample
position, so a chunk computed with enough context on each side reproduces the
offline result for its interior samples.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import dsp
from .audio_io import Waveform
from .dsp import FrameGrid
from .features import FeatureConfig, FeatureTracks, extract_tracks, to_bundle, tracks_from_frames
from .nets import LOUDNESS_SCALE, PHONETIC_SCALE, FeatureBundle, SVCModel
from .rng import noise_at


class Converter:
    def __init__(self, model: SVCModel, feat_cfg: FeatureConfig = FeatureConfig(), seed: int = 0,
                 speaker=None):
        if feat_cfg.hop != model.hop:
            raise ValueError(f"feature hop {feat_cfg.hop} ≠ model upsampling product {model.hop}")
        self.model = model
        self.feat_cfg = feat_cfg
        self.seed = seed
        self.speaker = model.embedding(speaker)

    def render_frames(self, bundle: FeatureBundle, first_frame: int) -> np.ndarray:
        """Network output for a frame window starting at absolute frame ``first_frame``."""
        hop = self.model.hop
        z = noise_at(self.seed, first_frame * hop, bundle.n_frames * hop)
        with ad.no_grad():
            y = self.model.generate(bundle, z, self.speaker)
        return y.data.reshape(-1).astype(np.float64)

    def convert(self, w: Waveform, tracks: FeatureTracks | None = None) -> Waveform:
        tracks = extract_tracks(w, self.feat_cfg) if tracks is None else tracks
        y = self.render_frames(to_bundle(tracks), 0)
        return Waveform(y[: len(w)], w.sample_rate)


class StreamingConverter:
    """Incremental conversion: push samples, get converted samples back.

    Output lags input by the model's context margin (the generator is
    non-causal, so lookahead cannot be avoided).
    """

    def __init__(self, conv: Converter, chunk: int = 4096, sample_rate: int = 16000):
        self.conv = conv
        self.cfg = conv.feat_cfg
        self.hop = conv.model.hop
        self.sr = sample_rate
        self.chunk_frames = max(1, chunk // self.hop)
        self.margin = conv.model.pipeline_margin_frames()
        self._buf = np.zeros(0)
        self._loud, self._phon, self._f0, self._conf = [], [], [], []
        self._exc = []           # excitation blocks, one per frame
        self._phase = 0.0
        self._held = 0.0
        self._next_out = 0       # next output frame to emit
        self._total = None
        self.samples_in = 0
        self.samples_out = 0
        self.compute_seconds = 0.0

    # -- features
    @property
    def _n_feat(self) -> int:
        return len(self._f0)

    def _extend_features(self, final: bool) -> None:
        n = self._buf.shape[0]
        half = self.cfg.frame_size // 2
        if final:
            stop = n // self.hop + 1
        else:
            # frame i spans [i*hop - half, i*hop + half); no end reflection allowed yet
            stop = (n - half) // self.hop + 1 if n >= half else 0
        start = self._n_feat
        if stop <= start or n <= half:
            return
        frames = dsp.frame_signal(self._buf, self.cfg.frame_size, self.hop, start, stop,
                                  total=n if final else None)
        grid = FrameGrid(self.cfg.frame_size, self.hop, stop - start, self.sr)
        tr = tracks_from_frames(frames, grid, self.cfg)
        self._loud.extend(tr.loudness.loud_db)
        self._phon.extend(tr.phonetic.frames)
        self._f0.extend(tr.f0.f0_hz)
        self._conf.extend(tr.f0.confidence)

    def _extend_excitation(self, final: bool) -> None:
        f0 = np.asarray(self._f0)
        n_blocks = f0.shape[0] if final else max(0, f0.shape[0] - 2)
        total = f0.shape[0] * self.hop if final else np.iinfo(np.int64).max // 4
        for i in range(len(self._exc), n_blocks):
            y, self._phase, self._held = dsp.excitation_segment(
                f0, self.hop, self.sr, i * self.hop, (i + 1) * self.hop, total, self._phase, self._held)
            self._exc.append(y)

    # -- network
    def _render(self, a: int, b: int, avail: int) -> np.ndarray:
        lo, hi = max(0, a - self.margin), min(avail, b + self.margin)
        bundle = FeatureBundle(np.asarray(self._loud[lo:hi])[None, :] * LOUDNESS_SCALE,
                               np.asarray(self._phon[lo:hi]).T * PHONETIC_SCALE,
                               np.stack(self._exc[lo:hi], axis=1))
        y = self.conv.render_frames(bundle, lo)
        return y[(a - lo) * self.hop:(b - lo) * self.hop]

    def _drain(self, final: bool) -> np.ndarray:
        avail = len(self._exc)
        out = []
        while True:
            a = self._next_out
            if a >= avail:
                break
            b = min(a + self.chunk_frames, avail)
            if not final and b + self.margin > avail:
                break
            out.append(self._render(a, b, avail))
            self._next_out = b
        y = np.concatenate(out) if out else np.zeros(0)
        if final and self._total is not None:
            y = y[: max(0, self._total - self.samples_out)]
        self.samples_out += y.shape[0]
        return y

    def push(self, samples: np.ndarray) -> np.ndarray:
        t0 = time.perf_counter()
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        self._buf = np.concatenate([self._buf, samples])
        self.samples_in += samples.shape[0]
        self._extend_features(False)
        self._extend_excitation(False)
        y = self._drain(False)
        self.compute_seconds += time.perf_counter() - t0
        return y

    def finish(self) -> np.ndarray:
        t0 = time.perf_counter()
        self._total = self._buf.shape[0]
        if self._total == 0:
            return np.zeros(0)
        self._extend_features(True)
        self._extend_excitation(True)
        y = self._drain(True)
        self.compute_seconds += time.perf_counter() - t0
        return y

    @property
    def real_time_factor(self) -> float:
        """Audio seconds processed per wall-clock second of compute."""
        if self.compute_seconds == 0:
            return float("inf")
        return (self.samples_in / self.sr) / self.compute_seconds


def convert_chunked(conv: Converter, w: Waveform, chunk: int, feed: int | None = None) -> tuple[Waveform, float]:
    """Run the streaming path over a whole waveform; returns (output, RTF)."""
    s = StreamingConverter(conv, chunk, w.sample_rate)
    feed = feed or chunk
    parts = [s.push(w.samples[i:i + feed]) for i in range(0, len(w), feed)]
    parts.append(s.finish())
    return Waveform(np.concatenate(parts), w.sample_rate), s.real_time_factor
