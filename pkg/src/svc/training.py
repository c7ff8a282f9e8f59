"""Optimization loop: staged losses, aligned/unaligned/mixup batches, RAdam, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .audio_io import Waveform, read_wav, segment
from .autodiff import Tensor
from .dsp import SpectralScaleSet
from .features import FeatureConfig, FeatureTracks, extract_tracks, load_tracks, slice_tracks, to_bundle
from .nets import SVCModel, mixup_embedding
from .rng import SplitMix64

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 800_000
    batch_size: int = 8
    segment_seconds: float = 1.0
    base_lr: float = 1e-4
    lr_half_period: int = 200_000
    disc_start_step: int = 100_000
    perceptual_start_step: int = 50_000
    mixup_start_step: int = 100_000
    mixup_every: int = 3
    seed: int = 0
    scale_factor: int = 1
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    prefetch_depth: int = 2

    def __post_init__(self):
        for name in ("total_steps", "batch_size", "lr_half_period", "mixup_every", "scale_factor"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be positive")
        if self.segment_seconds <= 0 or self.base_lr <= 0:
            raise TrainingError("segment_seconds and base_lr must be positive")

    def scaled(self, name: str) -> int:
        """A step constant divided by scale_factor, floored, at least 1."""
        return max(1, getattr(self, name) // self.scale_factor)


def lr_at(step: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * 0.5 ** (step // cfg.scaled("lr_half_period"))


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def radam_step(params: dict, grads: dict, state: OptimizerState, lr: float, debug: bool = False) -> None:
    """Rectified Adam; falls back to bias-corrected momentum while rho_t <= 4."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    b2t = b2 ** t
    rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    bc1 = 1.0 - b1 ** t
    if rho > 4.0:
        r = math.sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise TrainingError(f"{name}: grad shape {g.shape} ≠ param shape {p.data.shape}")
        if debug and not np.all(np.isfinite(g)):
            raise TrainingError(f"{name}: non-finite gradient")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        if rho > 4.0:
            v_hat = np.sqrt(v / (1.0 - b2t))
            p.data -= (lr * r) * m_hat / (v_hat + state.eps)
        else:
            p.data -= lr * m_hat


def clip_grads(params: dict, max_norm: float) -> tuple[float, bool]:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    if max_norm > 0 and total > max_norm:
        c = max_norm / total
        for p in params.values():
            p.grad *= c
        return total, True
    return total, False


# ------------------------------------------------------------------ corpus

@dataclass
class Utterance:
    speaker: str
    name: str
    wave: Waveform
    tracks: FeatureTracks


@dataclass
class Segment:
    utt: int
    start: int  # sample offset, a multiple of hop
    length: int
    samples: np.ndarray


@dataclass
class Corpus:
    speakers: list
    utterances: list
    segments: list = field(default_factory=list)

    def speaker_index(self, name: str) -> int:
        return self.speakers.index(name)

    def build_segments(self, seg_len: int, hop: int) -> None:
        """Cut every utterance into seg_len windows whose starts sit on the frame grid."""
        stride = max(hop, (seg_len // hop) * hop)
        self.segments = []
        for ui, u in enumerate(self.utterances):
            for k, w in enumerate(segment(u.wave, seg_len, stride)):
                if not np.any(w.samples):
                    continue  # silent windows would make the spectral loss degenerate
                self.segments.append(Segment(ui, k * stride, seg_len, w.samples))
        if not self.segments:
            raise TrainingError("corpus has no non-silent segments")


def prefetch(items, depth: int):
    """Yield ``items`` in order, computed by one background thread at most ``depth`` ahead."""
    q: queue.Queue = queue.Queue(maxsize=max(1, depth))
    done = object()

    def worker():
        try:
            for it in items:
                q.put(it)
        except BaseException as e:  # noqa: BLE001 - re-raised in the consumer
            q.put(e)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        it = q.get()
        if it is done:
            return
        if isinstance(it, BaseException):
            raise it
        yield it


def load_corpus(root, sample_rate: int, feat_cfg: FeatureConfig = FeatureConfig(),
                feature_dir=None, prefetch_depth: int = 2) -> Corpus:
    """Directory of per-speaker subdirectories of WAV files."""
    root = Path(root)
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not speakers:
        raise TrainingError(f"no speaker directories under {root}")
    files = [(spk, f) for spk in speakers for f in sorted((root / spk).glob("*.wav"))]
    if not files:
        raise TrainingError(f"no WAV files under {root}")

    def load(item):
        spk, f = item
        w = read_wav(f, sample_rate)
        tr = load_tracks(Path(feature_dir) / spk, f.stem) if feature_dir else extract_tracks(w, feat_cfg)
        return Utterance(spk, f.stem, w, tr)

    utts = list(prefetch((load(it) for it in files), prefetch_depth))
    return Corpus(speakers, utts)


# ------------------------------------------------------------------ batches

@dataclass
class BatchItem:
    segment: int
    source: int            # speaker index of the audio
    target: int            # speaker index conditioned on (mixup: the back-translation target)
    mix_with: int = -1     # mixup partner speaker
    nu: float = 1.0
    noise: np.ndarray | None = None


@dataclass
class BatchPlan:
    regime: str
    items: list


REGIMES = ("aligned", "unaligned", "mixup")


def regime_at(step: int, cfg: TrainConfig, n_speakers: int) -> str:
    if n_speakers >= 2:
        start = cfg.scaled("mixup_start_step")
        if step >= start and (step - start) % cfg.mixup_every == 0:
            return "mixup"
    return "aligned"


def _other(rng: SplitMix64, i: int, n: int) -> int:
    return (i + 1 + rng.integers(n - 1)) % n


def make_batch(regime: str, corpus: Corpus, rng: SplitMix64, batch_size: int, noise_len: int,
               segments: list | None = None, nu: float | None = None) -> BatchPlan:
    if regime not in REGIMES:
        raise TrainingError(f"unknown regime {regime!r}")
    n_spk = len(corpus.speakers)
    if regime != "aligned" and n_spk < 2:
        raise TrainingError(f"{regime} batches need at least 2 speakers, corpus has {n_spk}")
    if not corpus.segments:
        raise TrainingError("empty corpus")
    items = []
    for b in range(batch_size):
        si = segments[b] if segments is not None else rng.integers(len(corpus.segments))
        src = corpus.speaker_index(corpus.utterances[corpus.segments[si].utt].speaker)
        if regime == "aligned":
            item = BatchItem(si, src, src)
        elif regime == "unaligned":
            item = BatchItem(si, src, _other(rng, src, n_spk))
        else:
            partner = _other(rng, src, n_spk)
            weight = float(rng.uniform(1)[0]) if nu is None else nu
            item = BatchItem(si, src, src, mix_with=partner, nu=weight)
        item.noise = rng.uniform(noise_len)
        items.append(item)
    return BatchPlan(regime, items)


# ------------------------------------------------------------------ step

@dataclass
class StepReport:
    step: int
    regime: str
    lr: float
    losses: dict
    grad_norm_g: float
    grad_norm_d: float
    clipped: bool = False

    def as_log(self) -> dict:
        return {"step": self.step, "regime": self.regime, "lr": self.lr, **self.losses,
                "grad_norm_g": self.grad_norm_g, "grad_norm_d": self.grad_norm_d, "clipped": self.clipped}


@dataclass
class LossConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    scales: SpectralScaleSet = field(default_factory=SpectralScaleSet)
    pitch_frame: int = 1024
    phon_fft: int = 1024


class Trainer:
    def __init__(self, model: SVCModel, corpus: Corpus, cfg: TrainConfig, loss_cfg: LossConfig = LossConfig(),
                 feat_cfg: FeatureConfig = FeatureConfig(), config_hash: bytes = b"\0" * 32):
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.loss_cfg = loss_cfg
        self.feat_cfg = feat_cfg
        self.rng = SplitMix64(cfg.seed)
        self.step = 0
        self.opt_g = OptimizerState()
        self.opt_d = OptimizerState()
        self.config_hash = config_hash
        sr = corpus.utterances[0].wave.sample_rate
        self.sample_rate = sr
        self.hop = model.hop
        self.seg_len = int(round(cfg.segment_seconds * sr))
        if not corpus.segments:
            corpus.build_segments(self.seg_len, self.hop)
        self.n_seg_frames = self.seg_len // self.hop + 1
        self.pitch_e = L.PitchAutocorrExtractor(sr, frame=loss_cfg.pitch_frame, hop=self.hop)
        self.phon_e = L.MelStackExtractor(sr, fft_size=loss_cfg.phon_fft, hop=self.hop)
        self._bundles: dict = {}
        if len(model.speaker_ids) != len(corpus.speakers) and model.multi_speaker:
            raise TrainingError("model speaker table does not match corpus speakers")

    # -- gating
    def disc_active(self, step=None) -> bool:
        return (self.step if step is None else step) >= self.cfg.scaled("disc_start_step")

    def perceptual_active(self, step=None) -> bool:
        return (self.step if step is None else step) >= self.cfg.scaled("perceptual_start_step")

    # -- helpers
    def _segment_bundle(self, si: int):
        b = self._bundles.get(si)
        if b is None:
            seg = self.corpus.segments[si]
            tr = self.corpus.utterances[seg.utt].tracks
            b = to_bundle(slice_tracks(tr, seg.start // self.hop, self.n_seg_frames))
            self._bundles[si] = b
        return b

    def _speaker(self, idx: int):
        if not self.model.multi_speaker:
            return None
        return self.model.speakers[self.corpus.speakers[idx]]

    def _generate(self, bundle, noise, speaker) -> Tensor:
        y = self.model.generate(bundle, noise, speaker)
        return ad.slice_time(y, 0, self.seg_len)

    def forward_item(self, plan: BatchPlan, item: BatchItem):
        """(x, x_hat) for one item; mixup runs the gradient-free first pass here."""
        seg = self.corpus.segments[item.segment]
        x = seg.samples
        bundle = self._segment_bundle(item.segment)
        if plan.regime == "mixup":
            u = mixup_embedding(self._speaker(item.source), self._speaker(item.mix_with), item.nu)
            with ad.no_grad():
                x_u = self._generate(bundle, item.noise, u).data.reshape(-1).astype(np.float64)
            tr = extract_tracks(Waveform(x_u, self.sample_rate), self.feat_cfg)
            bundle = to_bundle(slice_tracks(tr, 0, self.n_seg_frames))
        return x, self._generate(bundle, item.noise, self._speaker(item.target))

    def generator_terms(self, regime: str, x, x_hat: Tensor) -> dict:
        terms = {}
        if regime != "unaligned":
            terms["recon"] = L.multires_recon(x, x_hat, self.loss_cfg.scales)
        if self.disc_active():
            terms["adv"] = L.lsgan_adv_loss(self.model.discriminator(x_hat))
        if self.perceptual_active():
            terms["pitch_perc"] = L.perceptual_loss(x, x_hat, self.pitch_e)
            terms["phon_perc"] = L.perceptual_loss(x, x_hat, self.phon_e)
        return terms

    def plans_for_step(self) -> list[BatchPlan]:
        regime = regime_at(self.step, self.cfg, len(self.corpus.speakers))
        noise_len = self.n_seg_frames * self.hop
        bs = self.cfg.batch_size
        if regime == "mixup":
            return [make_batch("mixup", self.corpus, self.rng, bs, noise_len)]
        plans = [make_batch("aligned", self.corpus, self.rng, bs, noise_len)]
        if len(self.corpus.speakers) >= 2 and (self.disc_active() or self.perceptual_active()):
            segs = [it.segment for it in plans[0].items]
            plans.append(make_batch("unaligned", self.corpus, self.rng, bs, noise_len, segments=segs))
        return plans

    def training_step(self, plans: list[BatchPlan] | None = None) -> StepReport:
        plans = self.plans_for_step() if plans is None else plans
        lr = lr_at(self.step, self.cfg)
        g_params = self.model.g_parameters()
        d_params = self.model.d_parameters()
        pairs = [(plan.regime, *self.forward_item(plan, it)) for plan in plans for it in plan.items]

        d_loss_val, gn_d = 0.0, 0.0
        clipped = False
        if self.disc_active():
            for p in d_params.values():
                p.zero_grad()
            d_loss = L.lsgan_d_loss([self.model.discriminator(Tensor(x.reshape(1, -1))) for _, x, _ in pairs],
                                    [self.model.discriminator(xh.detach()) for _, _, xh in pairs])
            d_loss_val = d_loss.item()
            self._check_finite({"d": d_loss_val})
            d_loss.backward()
            gn_d, c = clip_grads(d_params, self.cfg.grad_clip)
            clipped |= c
            radam_step(d_params, {k: p.grad for k, p in d_params.items()}, self.opt_d, lr)

        sums = {"recon": 0.0, "adv": 0.0, "pitch_perc": 0.0, "phon_perc": 0.0}
        g_total = None
        for regime, x, x_hat in pairs:
            terms = self.generator_terms(regime, x, x_hat)
            for k, v in terms.items():
                sums[k] += v.item()
            if regime == "unaligned":
                item_loss = L.unaligned_generator_loss(terms.get("adv", 0.0), terms.get("pitch_perc", 0.0),
                                                       terms.get("phon_perc", 0.0), self.loss_cfg.weights)
            else:
                item_loss = L.generator_total(terms, self.loss_cfg.weights)
            if isinstance(item_loss, Tensor):
                g_total = item_loss if g_total is None else g_total + item_loss
        g_val = g_total.item() if g_total is not None else 0.0
        self._check_finite({"g": g_val, **sums})
        for p in g_params.values():
            p.zero_grad()
        gn_g = 0.0
        if g_total is not None:
            g_total.backward()
            gn_g, c = clip_grads(g_params, self.cfg.grad_clip)
            clipped |= c
            radam_step(g_params, {k: p.grad for k, p in g_params.items()}, self.opt_g, lr)
        if clipped:
            log.info("step %d: gradient clipped (g %.3f, d %.3f)", self.step, gn_g, gn_d)

        regime = "+".join(p.regime for p in plans)
        report = StepReport(self.step, regime, lr, {"g_total": g_val, "d_loss": d_loss_val, **sums},
                            gn_g, gn_d, clipped)
        self.step += 1
        return report

    def _check_finite(self, values: dict) -> None:
        bad = {k: v for k, v in values.items() if not math.isfinite(v)}
        if bad:
            raise TrainingError(f"non-finite loss at step {self.step}: {json.dumps(values, default=str)}")

    def run(self, n_steps: int, on_report=None, on_checkpoint=None) -> list[StepReport]:
        reports = []
        for _ in range(n_steps):
            r = self.training_step()
            reports.append(r)
            if on_report:
                on_report(r)
            if on_checkpoint and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                on_checkpoint(self)
        return reports

    # -- persistence
    def to_bundle(self) -> "CheckpointBundle":
        tensors = {name: p.data for name, p in self.model.parameters().items()}
        for tag, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for name, m in opt.m.items():
                tensors[f"opt.{tag}.m.{name}"] = m
                tensors[f"opt.{tag}.v.{name}"] = opt.v[name]
            tensors[f"opt.{tag}.t"] = np.array([opt.t], dtype=np.int64)
        return CheckpointBundle(tensors, self.step, self.rng.state, self.config_hash)

    def load_bundle(self, b: "CheckpointBundle") -> None:
        params = self.model.parameters()
        missing = [n for n in params if n not in b.tensors]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            p.data = b.tensors[name].astype(p.data.dtype).copy()
            p.zero_grad()
        for tag, opt in (("g", self.opt_g), ("d", self.opt_d)):
            opt.m, opt.v = {}, {}
            prefix = f"opt.{tag}."
            for name, arr in b.tensors.items():
                if name.startswith(prefix + "m."):
                    opt.m[name[len(prefix) + 2:]] = arr.copy()
                elif name.startswith(prefix + "v."):
                    opt.v[name[len(prefix) + 2:]] = arr.copy()
            opt.t = int(b.tensors.get(prefix + "t", np.zeros(1, np.int64))[0])
        self.step = b.step
        self.rng.state = b.rng_state
        if b.config_hash != self.config_hash:
            log.warning("checkpoint config hash differs from the current config")


# ------------------------------------------------------------------ checkpoint file

CKPT_MAGIC = b"SVCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


@dataclass
class CheckpointBundle:
    tensors: dict
    step: int
    rng_state: int
    config_hash: bytes = b"\0" * 32


def config_hash(cfg) -> bytes:
    payload = cfg if isinstance(cfg, dict) else asdict(cfg)
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).digest()


def save_checkpoint(path, bundle: CheckpointBundle) -> None:
    if len(bundle.config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    out = [CKPT_MAGIC, struct.pack("<IQI", CKPT_VERSION, bundle.step, len(bundle.tensors))]
    for name, arr in bundle.tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    out.append(struct.pack("<Q", bundle.rng_state & ((1 << 64) - 1)))
    out.append(bundle.config_hash)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_checkpoint(path, expected_hash: bytes | None = None) -> CheckpointBundle:
    data = Path(path).read_bytes()
    try:
        if data[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: corrupt checkpoint (bad magic)")
        version, step, n = struct.unpack_from("<IQI", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        pos = 20
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            code, ndim = struct.unpack_from("<BI", data, pos)
            pos += 5
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims)) * dt.itemsize
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: corrupt checkpoint (truncated tensor {name})")
            tensors[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
            pos += nbytes
        (rng_state,) = struct.unpack_from("<Q", data, pos)
        h = data[pos + 8:pos + 40]
        if len(h) != 32 or pos + 40 != len(data):
            raise CheckpointError(f"{path}: corrupt checkpoint (bad trailer)")
    except (struct.error, KeyError, UnicodeDecodeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    if expected_hash is not None and h != expected_hash:
        log.warning("%s: config hash mismatch", path)
    return CheckpointBundle(tensors, step, rng_state, h)
