import logging

import numpy as np
import pytest

from svc import autodiff as ad
from svc.autodiff import Tensor
from svc.nets import (ContextStack, ContextStackConfig, DiscriminatorConfig, FeatureBundle, GeneratorConfig,
                      ModelConfig, NetError, SVCModel, context_stack_forward, mixup_embedding, receptive_field)
from svc.rng import SplitMix64

from helpers import tiny_model_config

# Default-config parameter counts, recorded at first build.
GOLDEN_G_TWO_SPEAKERS = 12_169_730
GOLDEN_G_ONE_SPEAKER = 11_038_594
GOLDEN_D = 445_442


def wn(c_in, c_out, k, bias=True):
    return c_out * c_in * k + c_out + (c_out if bias else 0)


def closed_form_counts(cfg: ModelConfig, n_speakers: int):
    c, g, d = cfg.context, cfg.generator, cfg.discriminator
    spk = cfg.speaker_dim if n_speakers >= 2 else 0

    def stack(d_in):
        n = c.n_blocks * c.layers_per_block
        return wn(d_in, c.channels, c.kernel) + (n - 1) * wn(c.channels, c.channels, c.kernel)

    cond_ch = 3 * c.channels + spk
    total = stack(1) + stack(cfg.phonetic_dim) + stack(g.hop)
    total += len(g.upsample_stages) * wn(cond_ch, cond_ch, 3)
    cond_out = cond_ch + (1 if cfg.excitation_skip else 0)
    r, s = g.residual_channels, g.skip_channels
    total += wn(g.noise_channels, r, 1)
    total += g.n_layers * (wn(r, 2 * r, g.kernel) + wn(cond_out, 2 * r, 1, bias=False) + wn(r, s, 1))
    total += (g.n_layers - 1) * wn(r, r, 1)
    total += wn(s, s, 1) + wn(s, 1, 1)
    total += n_speakers * cfg.speaker_dim if n_speakers >= 2 else 0
    disc = wn(1, d.channels, d.kernel) + (d.n_layers - 1) * wn(d.channels, d.channels, d.kernel)
    disc += wn(d.channels, 1, 1)
    return total, disc


def count(params):
    return sum(p.data.size for p in params.values())


def nan_probe(fn, length, pos):
    """Output positions that depend on input position ``pos`` (NaN propagation)."""
    x = np.zeros(length)
    x[pos] = np.nan
    with np.errstate(invalid="ignore"):
        y = fn(x)
    hit = np.nonzero(np.isnan(y))[0]
    return hit


# ---------------------------------------------------------------- configs and counts

def test_receptive_field_formula():
    assert receptive_field(dilations=[1, 2, 4], kernel=3) == 15
    assert receptive_field(GeneratorConfig()) == 6139
    assert receptive_field(dilations=[1, 2, 4, 512], kernel=1) == 1
    assert receptive_field(DiscriminatorConfig()) == 111
    assert receptive_field(ContextStackConfig()) == 1021


def test_golden_parameter_counts():
    two = SVCModel(ModelConfig(), ["a", "b"], seed=0)
    one = SVCModel(ModelConfig(), ["a"], seed=0)
    assert count(two.g_parameters()) == GOLDEN_G_TWO_SPEAKERS
    assert count(one.g_parameters()) == GOLDEN_G_ONE_SPEAKER
    assert count(two.d_parameters()) == GOLDEN_D
    assert closed_form_counts(ModelConfig(), 2) == (GOLDEN_G_TWO_SPEAKERS, GOLDEN_D)
    assert closed_form_counts(ModelConfig(), 1)[0] == GOLDEN_G_ONE_SPEAKER


def test_counts_are_pure_functions_of_config():
    cfg = tiny_model_config()
    a = SVCModel(cfg, ["x", "y", "z"], seed=1)
    b = SVCModel(cfg, ["x", "y", "z"], seed=99)
    assert count(a.parameters()) == count(b.parameters())
    assert closed_form_counts(cfg, 3) == (count(a.g_parameters()), count(a.d_parameters()))


def test_weight_norm_init():
    m = SVCModel(tiny_model_config(), ["a"], seed=0)
    p = m.g_parameters()
    v, g = p["gen.0.dil.v"].data, p["gen.0.dil.g"].data
    np.testing.assert_allclose(np.sqrt((v.astype(float) ** 2).sum(axis=(1, 2))), g, rtol=1e-6)
    assert not np.any(p["gen.0.dil.b"].data)


def test_generator_layer_count():
    cfg = GeneratorConfig()
    assert len(cfg.dilations) == 30
    assert cfg.dilations[:10] == [2 ** i for i in range(10)] == cfg.dilations[20:]
    assert cfg.hop == 256
    with pytest.raises(NetError):
        GeneratorConfig(n_layers=10, n_blocks=3)


# ---------------------------------------------------------------- context stack

def test_context_stack_shapes_and_zero():
    stack = ContextStack("s", 5, ContextStackConfig(2, 3, 8), SplitMix64(0))
    for f in (1, 7, 40):
        y = context_stack_forward(Tensor(np.random.default_rng(f).standard_normal((5, f))), stack)
        assert y.shape == (8, f)
    assert not np.any(stack(Tensor(np.zeros((5, 12)))).data)


def test_context_stack_receptive_field():
    cfg = ContextStackConfig(channels=4)
    stack = ContextStack("s", 1, cfg, SplitMix64(0))
    n, pos = 2000, 1000
    hit = nan_probe(lambda x: stack(Tensor(x[None, :])).data[0], n, pos)
    assert hit.max() - hit.min() + 1 == receptive_field(cfg) == 1021


# ---------------------------------------------------------------- conditioner

def _bundle(frames, phon_dim=40, hop=256, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureBundle(rng.standard_normal((1, frames)), rng.standard_normal((phon_dim, frames)),
                         rng.standard_normal((hop, frames)))


def test_conditioner_length_and_channels():
    cfg = tiny_model_config()
    multi = SVCModel(cfg, ["a", "b"], seed=0)
    single = SVCModel(cfg, ["a"], seed=0)
    b = _bundle(6)
    cm = multi.conditioner(b, multi.embedding("a"))
    cs = single.conditioner(b)
    assert cm.shape[1] == cs.shape[1] == 6 * 256
    assert multi.conditioner.channels - single.conditioner.channels == 64
    assert cm.shape[0] - cs.shape[0] == 64


def test_conditioner_depends_on_speaker():
    m = SVCModel(tiny_model_config(), ["a", "b"], seed=0)
    b = _bundle(4)
    ca, cb = m.conditioner(b, m.embedding("a")).data, m.conditioner(b, m.embedding("b")).data
    assert not np.array_equal(ca, cb)


def test_conditioner_rejects_grid_mismatch():
    with pytest.raises(NetError):
        FeatureBundle(np.zeros((1, 4)), np.zeros((40, 5)), np.zeros((256, 4)))


# ---------------------------------------------------------------- generator

@pytest.mark.parametrize("t", [256, 1000, 16000])
def test_generator_length_and_range(t):
    m = SVCModel(tiny_model_config(), ["a"], seed=0)
    cond = Tensor(np.random.default_rng(t).standard_normal((m.conditioner.out_channels, t)) * 3)
    y = m.generator(Tensor(np.random.default_rng(0).uniform(size=(1, t))), cond)
    assert y.shape == (1, t)
    assert np.all(np.abs(y.data) < 1)
    with pytest.raises(NetError):
        m.generator(Tensor(np.zeros((1, t + 1))), cond)


def _reduced_generator():
    cfg = ModelConfig(context=ContextStackConfig(1, 1, 2),
                      generator=GeneratorConfig(residual_channels=4, skip_channels=4),
                      discriminator=DiscriminatorConfig(channels=4))
    return SVCModel(cfg, ["a"], seed=0)


def test_generator_receptive_field_nan_probe():
    m = _reduced_generator()
    n, pos = 8192, 4000
    cond = Tensor(np.zeros((m.conditioner.out_channels, n)))
    with ad.precision("f64"):
        hit = nan_probe(lambda z: m.generator(Tensor(z[None, :]), cond).data[0], n, pos)
    assert hit.min() == pos - 3069 and hit.max() == pos + 3069
    assert hit.max() - hit.min() + 1 == receptive_field(m.cfg.generator) == 6139


def test_generator_bit_identical_outside_receptive_field():
    m = _reduced_generator()
    n, pos, half = 8192, 4000, 3069
    rng = np.random.default_rng(0)
    z = rng.uniform(size=(1, n))
    cond = Tensor(rng.standard_normal((m.conditioner.out_channels, n)))
    a = m.generator(Tensor(z), cond).data[0]
    z2 = z.copy()
    z2[0, pos] += 0.5
    b = m.generator(Tensor(z2), cond).data[0]
    outside = np.r_[0:pos - half, pos + half + 1:n]
    assert np.array_equal(a[outside], b[outside])
    assert not np.array_equal(a[pos - 10:pos + 10], b[pos - 10:pos + 10])


def test_generator_deterministic():
    b = _bundle(5)
    z = np.random.default_rng(3).uniform(size=5 * 256)
    outs = [SVCModel(tiny_model_config(), ["a", "b"], seed=4).generate(b, z, "b").data for _ in range(2)]
    assert np.array_equal(*outs)


# ---------------------------------------------------------------- discriminator

def test_discriminator_shapes_zero_and_rf():
    m = SVCModel(ModelConfig(context=ContextStackConfig(1, 1, 2), generator=GeneratorConfig(3, 3, 2, 2),
                             discriminator=DiscriminatorConfig(channels=4)), ["a"], seed=0)
    d = m.discriminator
    assert d(Tensor(np.random.default_rng(0).standard_normal((1, 500)))).shape == (1, 500)
    assert not np.any(d(Tensor(np.zeros((1, 300)))).data)
    hit = nan_probe(lambda x: d(Tensor(x[None, :])).data[0], 600, 300)
    assert hit.max() - hit.min() + 1 == receptive_field(DiscriminatorConfig()) == 111


def test_discriminator_translation_covariance():
    m = SVCModel(tiny_model_config(), ["a"], seed=0)
    x = np.random.default_rng(1).standard_normal(1000)
    s = 37
    a = m.discriminator(Tensor(x[None, :])).data[0]
    b = m.discriminator(Tensor(np.r_[np.zeros(s), x][None, :])).data[0]
    half = (receptive_field(m.cfg.discriminator) - 1) // 2
    np.testing.assert_allclose(b[s + half:1000 - half], a[half:1000 - s - half], rtol=1e-5, atol=1e-6)


def test_discriminator_short_input_warns(caplog):
    m = SVCModel(tiny_model_config(), ["a"], seed=0)
    with caplog.at_level(logging.WARNING):
        m.discriminator(Tensor(np.zeros((1, 50))))
    assert "receptive field" in caplog.text


# ---------------------------------------------------------------- speakers and mixup

def test_speaker_table():
    m = SVCModel(tiny_model_config(), ["alto", "tenor"], seed=0)
    assert m.embedding("alto").shape == (64,)
    with pytest.raises(NetError, match="alto, tenor"):
        m.embedding("bass")
    with pytest.raises(NetError):
        SVCModel(tiny_model_config(), ["a", "a"], seed=0)
    single = SVCModel(tiny_model_config(), ["solo"], seed=0)
    assert single.embedding("anything") is None


def test_mixup_examples():
    vj, vk = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.array_equal(mixup_embedding(vj, vk, 1.0), vj)
    assert np.array_equal(mixup_embedding(vj, vk, 0.0), vk)
    assert mixup_embedding(vj, vk, 0.5).tolist() == [0.5, 0.5]
    with pytest.raises(NetError):
        mixup_embedding(vj, np.zeros(3), 0.5)
    with pytest.raises(NetError):
        mixup_embedding(vj, vk, 1.5)


def test_mixup_endpoints_bit_identical_generation():
    m = SVCModel(tiny_model_config(), ["a", "b"], seed=2)
    b = _bundle(4, seed=5)
    z = np.random.default_rng(6).uniform(size=4 * 256)
    va, vb = m.embedding("a"), m.embedding("b")
    direct_a = m.generate(b, z, va).data
    direct_b = m.generate(b, z, vb).data
    assert np.array_equal(m.generate(b, z, mixup_embedding(va, vb, 1.0)).data, direct_a)
    assert np.array_equal(m.generate(b, z, mixup_embedding(va, vb, 0.0)).data, direct_b)
