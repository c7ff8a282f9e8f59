"""Signal and model builders shared by the tests."""

import numpy as np

from svc import autodiff as ad
from svc import losses as L
from svc.autodiff import Tensor
from svc.dsp import SpectralScaleSet
from svc.nets import ContextStackConfig, DiscriminatorConfig, FeatureBundle, GeneratorConfig, ModelConfig, SVCModel

SR = 16000


def sine(freq, seconds=1.0, amp=0.5, sr=SR, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t + phase)


def harmonic_clip(n=8000, f0=220.0, noise=0.003, seed=5, sr=SR):
    """Five harmonics with light vibrato, 50 ms fades and a small noise floor."""
    t = np.arange(n) / sr
    f = f0 * (1 + 0.02 * np.sin(2 * np.pi * 5 * t))
    ph = 2 * np.pi * np.cumsum(f) / sr
    dur = n / sr
    x = sum(0.3 / k * np.sin(k * ph) for k in range(1, 6))
    x = x * np.minimum(1, t * 20) * np.minimum(1, (dur - t) * 20)
    return x + noise * np.random.default_rng(seed).standard_normal(n)


def tiny_model_config(skip=True):
    return ModelConfig(context=ContextStackConfig(2, 4, 16),
                       generator=GeneratorConfig(8, 2, 16, 16),
                       discriminator=DiscriminatorConfig(channels=16),
                       excitation_skip=skip)


def fd_check(build, params, eps=1e-6, max_entries=None, seed=0):
    """Worst relative error between backward() and central differences.

    ``build`` rebuilds the scalar loss from the current parameter data. Each
    parameter's gradient is compared as a vector (norm-wise relative error);
    ``max_entries`` limits how many entries per parameter are probed.
    """
    for p in params:
        p.zero_grad()
    build().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = build().item()
            flat[i] = orig - eps
            down = build().item()
            flat[i] = orig
            num[n] = (up - down) / (2 * eps)
        ana = p.grad.reshape(-1)[idx]
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, np.linalg.norm(num - ana) / scale)
    return worst


def make_corpus(speakers=("a", "b"), seconds=0.5, f0s=(196.0, 262.0)):
    """In-memory corpus: one harmonic utterance per speaker."""
    from svc.audio_io import Waveform
    from svc.features import extract_tracks
    from svc.training import Corpus, Utterance

    utts = []
    n = int(seconds * SR)
    for k, spk in enumerate(speakers):
        w = Waveform(harmonic_clip(n, f0s[k % len(f0s)], seed=k), SR)
        utts.append(Utterance(spk, f"{spk}0", w, extract_tracks(w)))
    return Corpus(list(speakers), utts)


def make_trainer(speakers=("a", "b"), seed=0, **overrides):
    """Tiny-model trainer whose staged schedule starts within a few steps."""
    from svc.training import LossConfig, Trainer, TrainConfig

    kw = dict(batch_size=1, segment_seconds=0.128, base_lr=1e-3, lr_half_period=8, perceptual_start_step=2,
              disc_start_step=3, mixup_start_step=4, seed=seed)
    kw.update(overrides)
    corpus = make_corpus(speakers)
    model = SVCModel(tiny_model_config(), list(speakers), seed=seed)
    return Trainer(model, corpus, TrainConfig(**kw), LossConfig(scales=SpectralScaleSet((1024, 256, 64))))


def op_cases():
    """Every differentiable op, wrapped as a (2, 6) -> tensor map for gradient checks."""
    rng = np.random.default_rng(11)
    m = rng.standard_normal((6, 4))
    r = rng.standard_normal((2, 6))
    return {
        "scale": lambda x: ad.scale(x, -1.7),
        "square": ad.square,
        "abs": ad.abs_,
        "log": lambda x: ad.log(ad.square(x), 1e-3),
        "sqrt": lambda x: ad.sqrt(ad.square(x) + 1.0),
        "divide": lambda x: ad.divide(x, ad.sum_(ad.square(x))),
        "mean": lambda x: ad.mean(ad.mul(x, Tensor(r))),
        "slice_channels": lambda x: ad.slice_channels(x, 1, 2),
        "slice_time": lambda x: ad.slice_time(x, 2, 5),
        "reshape": lambda x: ad.mul(ad.reshape(x, (3, 4)), Tensor(r.reshape(3, 4))),
        "matmul_const": lambda x: ad.matmul_const(x, m),
        "concat": lambda x: ad.concat_channels(x, ad.square(x)),
        "sub_neg": lambda x: -(x - ad.square(x)),
        "tanh_sigmoid": lambda x: ad.mul(ad.tanh(x), ad.sigmoid(x)),
    }


def composite_setup(seed=0):
    """Tiny model, one 512-sample clip, every loss term active."""
    model = SVCModel(tiny_model_config(), ["a"], seed=seed)
    rng = np.random.default_rng(seed)
    frames = 3
    bundle = FeatureBundle(rng.standard_normal((1, frames)), rng.standard_normal((40, frames)),
                           0.1 * rng.standard_normal((256, frames)))
    noise = rng.uniform(size=frames * 256)
    x = sine(220.0, 512 / 16000) + 0.01 * rng.standard_normal(512)
    scales = SpectralScaleSet((512, 256, 128, 64))
    pitch, phon = L.PitchAutocorrExtractor(), L.MelStackExtractor(fft_size=512)

    def build():
        x_hat = ad.slice_time(model.generate(bundle, noise), 0, 512)
        terms = {"recon": L.multires_recon(x, x_hat, scales),
                 "adv": L.lsgan_adv_loss(model.discriminator(x_hat)),
                 "pitch_perc": L.perceptual_loss(x, x_hat, pitch),
                 "phon_perc": L.perceptual_loss(x, x_hat, phon)}
        return L.generator_total(terms)

    return model, build


def composite_fd_error():
    model, build = composite_setup()
    params = model.g_parameters()
    probe = [params[k] for k in ("gen.0.dil.v", "gen.0.dil.g", "gen.0.cond.v", "gen.post2.v", "gen.in.b",
                                  "cond.up.0.v", "cond.loud.0.v")]
    return fd_check(build, probe, eps=1e-6, max_entries=6)


def overfit_run(steps=500, skip=True):
    """Reconstruction-only training on one 8000-sample clip; returns (trainer, reports)."""
    from svc.audio_io import Waveform
    from svc.features import extract_tracks
    from svc.training import Corpus, Trainer, TrainConfig, Utterance

    w = Waveform(harmonic_clip(), SR)
    corpus = Corpus(["solo"], [Utterance("solo", "clip", w, extract_tracks(w))])
    off = 10 ** 9
    cfg = TrainConfig(total_steps=steps, batch_size=1, segment_seconds=0.5, base_lr=3e-3, lr_half_period=off,
                      disc_start_step=off, perceptual_start_step=off, mixup_start_step=off)
    trainer = Trainer(SVCModel(tiny_model_config(skip), ["solo"], seed=0), corpus, cfg)
    return trainer, trainer.run(steps)
