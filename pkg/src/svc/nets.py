"""Generator, discriminator, context stacks and the speaker lookup table.

Every convolution is weight-normalized. Layer layout:

* context stack: per feature kind, blocks of dilated k=3 convs with
  exponentially growing dilation, leaky-ReLU, residual when shapes allow;
* conditioner: the three stack outputs (plus an optional speaker embedding
  broadcast over frames) concatenated at frame rate, then nearest-neighbour
  upsampling interleaved with k=3 convs up to sample rate;
* generator: non-causal gated WaveNet driven by U(0,1) noise;
* discriminator: k=3 convs with linearly growing dilation, leaky-ReLU, and a
  1x1 head giving one score per sample.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .rng import SplitMix64

log = logging.getLogger(__name__)

SPEAKER_DIM = 64
LOUDNESS_SCALE = 1.0 / 50.0
PHONETIC_SCALE = 1.0 / 10.0


class NetError(ValueError):
    pass


# ------------------------------------------------------------------ configs

@dataclass
class ContextStackConfig:
    n_blocks: int = 2
    layers_per_block: int = 8
    channels: int = 128
    kernel: int = 3

    @property
    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.layers_per_block)] * self.n_blocks


@dataclass
class GeneratorConfig:
    n_layers: int = 30
    n_blocks: int = 3
    residual_channels: int = 128
    skip_channels: int = 128
    kernel: int = 3
    upsample_stages: list = field(default_factory=lambda: [4, 4, 4, 4])
    noise_channels: int = 1

    def __post_init__(self):
        if self.n_layers % self.n_blocks:
            raise NetError("n_layers must be a multiple of n_blocks")

    @property
    def dilations(self) -> list[int]:
        per = self.n_layers // self.n_blocks
        return [2 ** i for i in range(per)] * self.n_blocks

    @property
    def hop(self) -> int:
        return int(np.prod(self.upsample_stages))


@dataclass
class DiscriminatorConfig:
    n_layers: int = 10
    channels: int = 128
    kernel: int = 3
    leakiness: float = 0.2

    @property
    def dilations(self) -> list[int]:
        return list(range(1, self.n_layers + 1))


def receptive_field(cfg=None, *, dilations=None, kernel: int = 3) -> int:
    """1 + (kernel - 1) * sum(dilations), from a config or explicit dilations."""
    if cfg is not None:
        dilations, kernel = cfg.dilations, cfg.kernel
    return 1 + (kernel - 1) * int(sum(dilations))


# ------------------------------------------------------------------ layers

class Module:
    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for attr, val in vars(self).items():
            if isinstance(val, Parameter):
                out[val.name] = val
            elif isinstance(val, Module):
                out.update(val.parameters())
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        out.update(item.parameters())
            elif isinstance(val, dict):
                for item in val.values():
                    if isinstance(item, Module):
                        out.update(item.parameters())
                    elif isinstance(item, Parameter):
                        out[item.name] = item
        return out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


class WNConv1d(Module):
    """Weight-normalized conv: effective weight g * v / ||v|| per output channel."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, dilation: int,
                 rng: SplitMix64, bias: bool = True):
        std = 1.0 / math.sqrt(c_in * kernel)
        v = rng.normal((c_out, c_in, kernel)) * std
        self.v = Parameter(v, name=f"{name}.v")
        self.g = Parameter(np.sqrt(np.sum(v * v, axis=(1, 2))), name=f"{name}.g")
        self.b = Parameter(np.zeros(c_out), name=f"{name}.b") if bias else None
        self.dilation = dilation

    def weight(self) -> Tensor:
        return ad.weight_norm_effective(self.v, self.g)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight(), self.b, self.dilation)


class ContextStack(Module):
    def __init__(self, name: str, in_dim: int, cfg: ContextStackConfig, rng: SplitMix64):
        self.cfg = cfg
        self.layers = []
        c_in = in_dim
        for i, d in enumerate(cfg.dilations):
            self.layers.append(WNConv1d(f"{name}.{i}", c_in, cfg.channels, cfg.kernel, d, rng))
            c_in = cfg.channels

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            y = ad.leaky_relu(layer(x))
            x = y + x if y.shape == x.shape else y
        return x


def context_stack_forward(features: Tensor, stack: ContextStack) -> Tensor:
    return stack(features)


@dataclass
class FeatureBundle:
    """Frame-aligned conditioning arrays, all with F frames.

    loudness (1, F), phonetic (D, F), excitation (hop, F): the sample-rate
    excitation cut into hop-long blocks, block i holding samples [i*hop, (i+1)*hop).
    """
    loudness: np.ndarray
    phonetic: np.ndarray
    excitation: np.ndarray

    def __post_init__(self):
        n = {self.loudness.shape[1], self.phonetic.shape[1], self.excitation.shape[1]}
        if len(n) != 1:
            raise NetError(f"feature grids disagree: {sorted(n)} frames")

    @property
    def n_frames(self) -> int:
        return self.loudness.shape[1]

    @classmethod
    def from_tracks(cls, loudness, phonetic, excitation: np.ndarray, hop: int) -> "FeatureBundle":
        f = loudness.loud_db.shape[0]
        if phonetic.frames.shape[0] != f:
            raise NetError("loudness and phonetic tracks have different frame counts")
        exc = np.asarray(excitation, dtype=np.float64)[: f * hop]
        if exc.shape[0] < f * hop:
            exc = np.concatenate([exc, np.zeros(f * hop - exc.shape[0])])
        return cls(loudness.loud_db[None, :] * LOUDNESS_SCALE,
                   phonetic.frames.T * PHONETIC_SCALE,
                   exc.reshape(f, hop).T.copy())

    def slice(self, start: int, stop: int) -> "FeatureBundle":
        return FeatureBundle(self.loudness[:, start:stop], self.phonetic[:, start:stop],
                             self.excitation[:, start:stop])


class Conditioner(Module):
    def __init__(self, stack_cfg: ContextStackConfig, phonetic_dim: int, hop_stages: list,
                 speaker_dim: int, rng: SplitMix64, excitation_skip: bool = True):
        hop = int(np.prod(hop_stages))
        self.loud_stack = ContextStack("cond.loud", 1, stack_cfg, rng)
        self.phon_stack = ContextStack("cond.phon", phonetic_dim, stack_cfg, rng)
        self.exc_stack = ContextStack("cond.exc", hop, stack_cfg, rng)
        self.speaker_dim = speaker_dim
        self.channels = 3 * stack_cfg.channels + speaker_dim
        self.stages = list(hop_stages)
        self.up = [WNConv1d(f"cond.up.{i}", self.channels, self.channels, 3, 1, rng)
                   for i in range(len(self.stages))]
        # the block-arranged excitation loses intra-frame position after
        # nearest-neighbour upsampling, so the raw sine also joins at sample rate
        self.excitation_skip = excitation_skip
        self.out_channels = self.channels + (1 if excitation_skip else 0)

    def frame_rate(self, bundle: FeatureBundle, speaker: Tensor | None) -> Tensor:
        parts = [self.loud_stack(Tensor(bundle.loudness)),
                 self.phon_stack(Tensor(bundle.phonetic)),
                 self.exc_stack(Tensor(bundle.excitation))]
        if self.speaker_dim:
            if speaker is None:
                raise NetError("multi-speaker model needs a speaker embedding")
            parts.append(ad.nn_upsample(ad.reshape(speaker, (self.speaker_dim, 1)), bundle.n_frames))
        return ad.concat_channels(*parts)

    def __call__(self, bundle: FeatureBundle, speaker: Tensor | None = None) -> Tensor:
        h = self.frame_rate(bundle, speaker)
        for factor, conv in zip(self.stages, self.up):
            h = ad.leaky_relu(conv(ad.nn_upsample(h, factor)))
        if self.excitation_skip:
            exc = bundle.excitation.T.reshape(1, -1)
            h = ad.concat_channels(h, Tensor(exc))
        return h


def build_conditioner(bundle: FeatureBundle, speaker: Tensor | None, conditioner: Conditioner) -> Tensor:
    return conditioner(bundle, speaker)


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, cond_channels: int, rng: SplitMix64):
        self.cfg = cfg
        r, s = cfg.residual_channels, cfg.skip_channels
        self.inp = WNConv1d("gen.in", cfg.noise_channels, r, 1, 1, rng)
        self.dil = []
        self.cond = []
        self.res = []
        self.skip = []
        for i, d in enumerate(cfg.dilations):
            self.dil.append(WNConv1d(f"gen.{i}.dil", r, 2 * r, cfg.kernel, d, rng))
            self.cond.append(WNConv1d(f"gen.{i}.cond", cond_channels, 2 * r, 1, 1, rng, bias=False))
            self.skip.append(WNConv1d(f"gen.{i}.skip", r, s, 1, 1, rng))
            if i < cfg.n_layers - 1:
                self.res.append(WNConv1d(f"gen.{i}.res", r, r, 1, 1, rng))
        self.post1 = WNConv1d("gen.post1", s, s, 1, 1, rng)
        self.post2 = WNConv1d("gen.post2", s, 1, 1, 1, rng)

    def __call__(self, z: Tensor, cond: Tensor) -> Tensor:
        if z.shape[1] != cond.shape[1]:
            raise NetError(f"noise length {z.shape[1]} ≠ conditioner length {cond.shape[1]}")
        r = self.cfg.residual_channels
        x = self.inp(z)
        skips = None
        for i in range(self.cfg.n_layers):
            h = self.dil[i](x) + self.cond[i](cond)
            gated = ad.tanh(ad.slice_channels(h, 0, r)) * ad.sigmoid(ad.slice_channels(h, r, 2 * r))
            sk = self.skip[i](gated)
            skips = sk if skips is None else skips + sk
            if i < self.cfg.n_layers - 1:
                x = x + self.res[i](gated)
        out = self.post1(ad.leaky_relu(skips))
        out = self.post2(ad.leaky_relu(out))
        return ad.tanh(out)


def generator_forward(z: Tensor, cond: Tensor, gen: Generator) -> Tensor:
    return gen(z, cond)


class Discriminator(Module):
    def __init__(self, cfg: DiscriminatorConfig, rng: SplitMix64):
        self.cfg = cfg
        self.layers = []
        c_in = 1
        for i, d in enumerate(cfg.dilations):
            self.layers.append(WNConv1d(f"disc.{i}", c_in, cfg.channels, cfg.kernel, d, rng))
            c_in = cfg.channels
        self.head = WNConv1d("disc.head", cfg.channels, 1, 1, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        rf = receptive_field(self.cfg)
        if x.shape[-1] < rf:
            log.warning("discriminator input of %d samples is shorter than its receptive field (%d)",
                        x.shape[-1], rf)
        h = x
        for layer in self.layers:
            h = ad.leaky_relu(layer(h))
        return self.head(h)


def discriminator_forward(x: Tensor, disc: Discriminator) -> Tensor:
    return disc(x)


class SpeakerTable(Module):
    def __init__(self, ids, dim: int, rng: SplitMix64):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise NetError("duplicate speaker ids")
        self.dim = dim
        self.ids = ids
        self.vectors = {sid: Parameter(rng.normal(dim), name=f"spk.{sid}") for sid in ids}

    def __getitem__(self, sid) -> Parameter:
        try:
            return self.vectors[sid]
        except KeyError:
            raise NetError(f"unknown speaker {sid!r}; available: {', '.join(self.ids)}") from None

    def __len__(self):
        return len(self.ids)


def mixup_embedding(v_j, v_j2, nu: float):
    """nu * v_j + (1 - nu) * v_j2; works on Tensors (differentiable) and arrays."""
    if not 0.0 <= nu <= 1.0:
        raise NetError(f"mixup weight {nu} outside [0, 1]")
    if isinstance(v_j, Tensor):
        if v_j.shape != v_j2.shape:
            raise NetError(f"embedding dims differ: {v_j.shape} vs {v_j2.shape}")
        return ad.scale(v_j, nu) + ad.scale(v_j2, 1.0 - nu)
    v_j, v_j2 = np.asarray(v_j, dtype=float), np.asarray(v_j2, dtype=float)
    if v_j.shape != v_j2.shape:
        raise NetError(f"embedding dims differ: {v_j.shape} vs {v_j2.shape}")
    return nu * v_j + (1.0 - nu) * v_j2


# ------------------------------------------------------------------ bundle

@dataclass
class ModelConfig:
    context: ContextStackConfig = field(default_factory=ContextStackConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    phonetic_dim: int = 40
    speaker_dim: int = SPEAKER_DIM
    excitation_skip: bool = True


class SVCModel:
    """Generator side (conditioner + WaveNet + speaker table) and discriminator."""

    def __init__(self, cfg: ModelConfig, speakers=(), seed: int = 0):
        self.cfg = cfg
        rng = SplitMix64(seed)
        self.multi_speaker = len(speakers) >= 2
        spk_dim = cfg.speaker_dim if self.multi_speaker else 0
        self.speakers = SpeakerTable(speakers if self.multi_speaker else [], cfg.speaker_dim, rng)
        self.conditioner = Conditioner(cfg.context, cfg.phonetic_dim, cfg.generator.upsample_stages,
                                       spk_dim, rng, cfg.excitation_skip)
        self.generator = Generator(cfg.generator, self.conditioner.out_channels, rng)
        self.discriminator = Discriminator(cfg.discriminator, rng)
        self.speaker_ids = list(speakers)

    @property
    def hop(self) -> int:
        return self.cfg.generator.hop

    def g_parameters(self) -> dict[str, Parameter]:
        out = self.conditioner.parameters()
        out.update(self.generator.parameters())
        out.update(self.speakers.parameters())
        return out

    def d_parameters(self) -> dict[str, Parameter]:
        return self.discriminator.parameters()

    def parameters(self) -> dict[str, Parameter]:
        out = self.g_parameters()
        out.update(self.d_parameters())
        return out

    def embedding(self, speaker) -> Tensor | None:
        """Speaker id -> embedding; single-speaker models ignore the id."""
        if not self.multi_speaker:
            return None
        if isinstance(speaker, Tensor):
            return speaker
        return self.speakers[speaker]

    def generate(self, bundle: FeatureBundle, z: np.ndarray, speaker=None) -> Tensor:
        """Waveform of length n_frames * hop from noise ``z`` (same length)."""
        cond = self.conditioner(bundle, self.embedding(speaker))
        return self.generator(Tensor(np.asarray(z).reshape(1, -1)), cond)

    def pipeline_margin_frames(self) -> int:
        """Frames of context each side that can influence an output frame."""
        ctx = (receptive_field(self.cfg.context) - 1) // 2
        up = len(self.cfg.generator.upsample_stages)
        gen = (receptive_field(self.cfg.generator) - 1) // 2
        return ctx + up + math.ceil(gen / self.hop) + 1
