"""Objective terms for the generator and discriminator.

Per-item functions take (1, T) tensors; passing lists sums over the batch.
The reference signal ``x`` never carries gradients; ``x_hat`` may.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import LOG_EPS, SpectralScaleSet, mel_filterbank

AUTOCORR_EPS = 1e-6


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 4.0
    beta: float = 1.0
    gamma: float = 10.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise LossError("loss weights must be nonnegative")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x).reshape(1, -1))


def _batched(fn):
    def wrapper(*args, **kwargs):
        if args and isinstance(args[0], (list, tuple)):
            n_lists = 0
            while n_lists < len(args) and isinstance(args[n_lists], (list, tuple)):
                n_lists += 1
            rest = args[n_lists:]
            items = [fn(*a, *rest, **kwargs) for a in zip(*args[:n_lists])]
            if not items:
                raise LossError("empty batch")
            total = items[0]
            for it in items[1:]:
                total = total + it
            return total
        return fn(*args, **kwargs)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ------------------------------------------------------------------ adversarial

@_batched
def lsgan_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean_t (1 - D(x))^2 + mean_t D(x_hat)^2."""
    d_real, d_fake = _t(d_real), _t(d_fake)
    if d_real.data.size == 0 or d_fake.data.size == 0:
        raise LossError("empty score tensor")
    return ad.mean(ad.square(1.0 - d_real)) + ad.mean(ad.square(d_fake))


@_batched
def lsgan_adv_loss(d_fake: Tensor) -> Tensor:
    """mean_t (1 - D(x_hat))^2."""
    d_fake = _t(d_fake)
    if d_fake.data.size == 0:
        raise LossError("empty score tensor")
    return ad.mean(ad.square(1.0 - d_fake))


# ------------------------------------------------------------------ spectral

def frobenius(x: Tensor) -> Tensor:
    """sqrt(sum x^2) with a zero subgradient at the origin."""
    nrm = float(np.sqrt(np.sum(x.data.astype(np.float64) ** 2)))
    val = np.array([nrm], dtype=x.data.dtype)

    def bw(g):
        if nrm == 0.0:
            return (np.zeros_like(x.data),)
        return (g.reshape(()) * x.data / nrm,)

    return ad.make_op(val, (x,), bw)


@_batched
def spectral_distance(x, x_hat, m: int) -> Tensor:
    """||S - S_hat||_F / ||S||_F + ||log S - log S_hat||_1 / N at FFT size m, hop m/4."""
    x, x_hat = _t(x), _t(x_hat)
    if x.shape != x_hat.shape:
        raise LossError(f"length mismatch {x.shape} vs {x_hat.shape}")
    if not np.any(x.data):
        raise LossError("degenerate reference: zero-energy signal")
    hop = m // 4
    with ad.no_grad():
        s = ad.dft_magnitude(x, m, hop)
    s_hat = ad.dft_magnitude(x_hat, m, hop)
    ref_norm = float(np.sqrt(np.sum(s.data.astype(np.float64) ** 2)))
    conv = ad.scale(frobenius(s_hat - s), 1.0 / ref_norm)
    log_diff = ad.abs_(ad.log(s_hat, LOG_EPS) - Tensor(np.log(s.data + LOG_EPS)))
    return conv + ad.mean(log_diff)


@_batched
def multires_recon(x, x_hat, scales: SpectralScaleSet = SpectralScaleSet()) -> Tensor:
    x = _t(x)
    if x.shape[-1] < max(scales.fft_sizes) // 2 + 1:
        raise LossError(f"signal of {x.shape[-1]} samples too short for fft {max(scales.fft_sizes)}")
    total = None
    for m in scales:
        term = spectral_distance(x, x_hat, m)
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / len(scales))


# ------------------------------------------------------------------ perceptual

def _zero_framed(x: Tensor, frame: int, hop: int) -> Tensor:
    """Center zero-padded frames (n_frames, frame), differentiable."""
    sig = x.data.reshape(-1)
    n = sig.shape[0]
    pad = frame // 2
    padded = np.concatenate([np.zeros(pad, sig.dtype), sig, np.zeros(pad, sig.dtype)])
    n_frames = n // hop + 1
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame)[None, :]
    frames = padded[idx]

    def bw(g):
        gp = np.bincount(idx.reshape(-1), weights=g.reshape(-1), minlength=padded.shape[0])
        return (gp[pad:pad + n].astype(sig.dtype).reshape(x.shape),)

    return ad.make_op(frames, (x,), bw)


def normalized_autocorr(frames: Tensor, tau_min: int, tau_max: int) -> Tensor:
    """r[f, k] = <h, s_tau> / sqrt(|h|^2 |s_tau|^2 + eps), tau = tau_min + k.

    h is the first N - tau_max samples of frame f and s_tau the same span
    shifted by tau.
    """
    fr = frames.data
    n = fr.shape[1]
    width = n - tau_max
    taus = range(tau_min, tau_max + 1)
    head = fr[:, :width]
    b = np.sum(head * head, axis=1)
    a_all, c_all, s_all = [], [], []
    for tau in taus:
        seg = fr[:, tau:tau + width]
        a_all.append(np.sum(head * seg, axis=1))
        c_all.append(np.sum(seg * seg, axis=1))
    a = np.stack(a_all, axis=1)
    c = np.stack(c_all, axis=1)
    s = np.sqrt(b[:, None] * c + AUTOCORR_EPS)
    r = a / s

    def bw(g):
        gf = np.zeros_like(fr)
        for k, tau in enumerate(taus):
            seg = fr[:, tau:tau + width]
            p = (g[:, k] / s[:, k])[:, None]
            q = (g[:, k] * a[:, k] / s[:, k] ** 3)[:, None]
            gf[:, :width] += p * seg - q * c[:, k][:, None] * head
            gf[:, tau:tau + width] += p * head - q * b[:, None] * seg
        return (gf,)

    return ad.make_op(r, (frames,), bw)


class PerceptualExtractor:
    id = "base"

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class PitchAutocorrExtractor(PerceptualExtractor):
    """Pitch-structure map: framed normalized autocorrelation over 80-600 Hz lags."""

    id = "autocorr-pitch-v1"

    def __init__(self, sample_rate: int = 16000, frame: int = 1024, hop: int = 256,
                 fmin: float = 80.0, fmax: float = 600.0):
        self.frame, self.hop = frame, hop
        self.tau_min = int(np.floor(sample_rate / fmax))
        self.tau_max = int(np.ceil(sample_rate / fmin))
        if self.tau_max >= frame:
            raise LossError(f"frame {frame} too short for {fmin} Hz")

    def __call__(self, x: Tensor) -> Tensor:
        return normalized_autocorr(_zero_framed(_t(x), self.frame, self.hop), self.tau_min, self.tau_max)


class MelStackExtractor(PerceptualExtractor):
    """Differentiable counterpart of the mel-stack phonetic features."""

    id = "melstack-v1"

    def __init__(self, sample_rate: int = 16000, fft_size: int = 1024, hop: int = 256, n_mels: int = 40):
        self.fft_size, self.hop = fft_size, hop
        self.fb = mel_filterbank(n_mels, fft_size, sample_rate)

    def __call__(self, x: Tensor) -> Tensor:
        mag = ad.dft_magnitude(_t(x), self.fft_size, self.hop)
        return ad.log(ad.matmul_const(ad.square(mag), self.fb.astype(mag.data.dtype)), LOG_EPS)


@_batched
def perceptual_loss(x, x_hat, e: PerceptualExtractor) -> Tensor:
    """Mean absolute difference of extractor activations."""
    x, x_hat = _t(x), _t(x_hat)
    if x.shape != x_hat.shape:
        raise LossError(f"length mismatch {x.shape} vs {x_hat.shape}")
    with ad.no_grad():
        hx = e(x)
    hy = e(x_hat)
    if hx.shape != hy.shape:
        raise LossError(f"extractor output shape mismatch {hx.shape} vs {hy.shape}")
    return ad.mean(ad.abs_(hy - Tensor(hx.data)))


# ------------------------------------------------------------------ totals

def _w(term, weight: float):
    if isinstance(term, Tensor):
        return ad.scale(term, weight)
    return weight * term


def generator_total(terms: dict, w: LossWeights = LossWeights()):
    """recon + alpha*adv + beta*pitch_perc + gamma*phon_perc; missing terms count as 0."""
    total = terms.get("recon", 0.0)
    for key, weight in (("adv", w.alpha), ("pitch_perc", w.beta), ("phon_perc", w.gamma)):
        term = terms.get(key, 0.0)
        total = total + _w(term, weight)
    return total


def unaligned_generator_loss(adv, pitch_perc, phon_perc, w: LossWeights = LossWeights()):
    """alpha*adv + beta*pitch_perc + gamma*phon_perc (no reconstruction target)."""
    return generator_total({"recon": 0.0, "adv": adv, "pitch_perc": pitch_perc, "phon_perc": phon_perc}, w)


def multi_singer_totals(aligned: dict | None, unaligned: dict | None, mixup: dict | None,
                        w: LossWeights = LossWeights()):
    """(L_D_multi, L_G_multi) summed over the supervised, unaligned and mixup branches.

    Each branch dict holds ``d`` (its discriminator loss) and the generator
    terms; the unaligned branch ignores any ``recon`` entry.
    """
    l_d, l_g = 0.0, 0.0
    for name, branch in (("aligned", aligned), ("unaligned", unaligned), ("mixup", mixup)):
        if not branch:
            continue
        l_d = l_d + branch.get("d", 0.0)
        if name == "unaligned":
            g = unaligned_generator_loss(branch.get("adv", 0.0), branch.get("pitch_perc", 0.0),
                                         branch.get("phon_perc", 0.0), w)
        else:
            g = generator_total(branch, w)
        l_g = l_g + g
    return l_d, l_g
