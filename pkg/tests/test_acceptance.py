"""Acceptance criteria, one test per criterion.

Each test records its measured quantities as ``detail`` properties; the
terminal summary prints one PASS/FAIL line per criterion.
"""

import dataclasses
import time

import numpy as np
import pytest

from svc import autodiff as ad
from svc import dsp
from svc import losses as L
from svc.audio_io import Waveform
from svc.autodiff import Parameter, Tensor
from svc.features import load_tracks, save_tracks
from svc.inference import Converter, convert_chunked
from svc.metrics import evaluate_tracks, evaluate_waveforms
from svc.nets import (ContextStackConfig, DiscriminatorConfig, FeatureBundle, GeneratorConfig, ModelConfig,
                      SVCModel, mixup_embedding, receptive_field)
from svc.training import load_checkpoint, save_checkpoint

from helpers import (SR, composite_fd_error, fd_check, harmonic_clip, make_trainer, op_cases, sine,
                     tiny_model_config)


def detail(record_property, text):
    record_property("detail", text)


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "loss identities: recon(x, x) = recon(x, -x) = 0")
def test_loss_identities(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2024)
    for k in range(20):
        x = rng.standard_normal(4096) * rng.uniform(0.01, 2.0)
        if k % 2:
            x = sine(rng.uniform(80, 2000), 4096 / SR) + 0.1 * x
        worst = max(worst, abs(L.multires_recon(x, x).item()), abs(L.multires_recon(x, -x).item()))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"max |loss| {worst:.1e}, {elapsed:.2f} s")
    assert worst <= 1e-7
    assert elapsed < 10


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "adversarial arithmetic and composite weights")
def test_adversarial_arithmetic(record_property):
    cases = [(1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.0, 1.0, 2.0)]
    for real, fake, want in cases:
        got = L.lsgan_d_loss(Tensor(np.full((1, 9), real)), Tensor(np.full((1, 9), fake))).item()
        assert got == want
    assert L.lsgan_adv_loss(Tensor([[0.0, 0.0]])).item() == 1.0
    assert L.lsgan_adv_loss(Tensor([[0.0, 2.0]])).item() == 1.0
    total = L.generator_total({"recon": 1.0, "adv": 1.0, "pitch_perc": 1.0, "phon_perc": 1.0},
                              L.LossWeights(4, 1, 10))
    detail(record_property, f"D cases 0/0.5/2.0 exact, composite {total}")
    assert total == 16.0


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "gradients match central differences")
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    errors = {}
    with ad.precision("f64"):
        rng = np.random.default_rng(0)
        for name, op in op_cases().items():
            x = Parameter(rng.standard_normal((2, 6)) + 0.1)
            w = Tensor(rng.standard_normal(op(Tensor(x.data)).shape))
            errors[name] = fd_check(lambda: ad.sum_(ad.mul(op(x), w)), [x])
        x = Parameter(rng.standard_normal((3, 12)))
        k = Parameter(rng.standard_normal((2, 3, 3)))
        b = Parameter(rng.standard_normal(2))
        errors["conv1d"] = fd_check(lambda: ad.sum_(ad.square(ad.conv1d(x, k, b, 2))), [x, k, b])
        errors["unary"] = max(fd_check(lambda: ad.sum_(ad.square(ad.unary(kind, x))), [x])
                              for kind in ("tanh", "sigmoid", "leaky_relu"))
        errors["upsample"] = fd_check(lambda: ad.sum_(ad.square(ad.nn_upsample(x, 3))), [x])
        v, g = Parameter(rng.standard_normal((3, 2, 3))), Parameter(rng.uniform(0.5, 2, 3))
        r = Tensor(rng.standard_normal((3, 2, 3)))
        errors["weight_norm"] = fd_check(lambda: ad.sum_(ad.mul(ad.weight_norm_effective(v, g), r)), [v, g])
        s = Parameter(rng.standard_normal((1, 300)))
        errors["dft_magnitude"] = fd_check(lambda: ad.sum_(ad.dft_magnitude(s, 64, 16)), [s], max_entries=60)
        errors["composite"] = composite_fd_error()
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    detail(record_property, f"{len(errors)} checks, worst {worst} {errors[worst]:.1e}, {elapsed:.1f} s")
    assert errors[worst] < 1e-3
    assert elapsed < 300


# ---------------------------------------------------------------- 4

def _reduced(cfg_g=GeneratorConfig(), cfg_d=DiscriminatorConfig()):
    g = dataclasses.replace(cfg_g, residual_channels=4, skip_channels=4)
    d = dataclasses.replace(cfg_d, channels=4)
    return SVCModel(ModelConfig(context=ContextStackConfig(1, 1, 2), generator=g, discriminator=d), ["a"], seed=1)


def _affected(fn, n, pos):
    """Output positions reachable from input ``pos``, found with a NaN probe.

    A finite bump must leave every output outside that set bit-identical; it
    cannot map the whole set, since far-edge contributions fall below rounding.
    """
    rng = np.random.default_rng(pos)
    base = rng.uniform(size=n)
    bumped = base.copy()
    bumped[pos] += 0.5
    nan = base.copy()
    nan[pos] = np.nan
    a, b = fn(base), fn(bumped)
    with np.errstate(invalid="ignore"):
        c = fn(nan)
    finite = np.nonzero(a != b)[0]
    probe = np.nonzero(np.isnan(c))[0]
    assert set(finite) <= set(probe)
    return probe


@pytest.mark.criterion(4, "measured receptive fields equal the formula")
def test_receptive_fields(record_property):
    t0 = time.perf_counter()
    with ad.precision("f64"):
        m = _reduced()
        n, pos = 8192, 4100
        cond = Tensor(np.random.default_rng(0).standard_normal((m.conditioner.out_channels, n)))
        hit_g = _affected(lambda z: m.generator(Tensor(z[None, :]), cond).data[0], n, pos)
        hit_d = _affected(lambda x: m.discriminator(Tensor(x[None, :])).data[0], 1000, 500)
    rf_g = hit_g.max() - hit_g.min() + 1
    rf_d = hit_d.max() - hit_d.min() + 1
    assert np.array_equal(hit_g, np.arange(pos - 3069, pos + 3070))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"G {rf_g} (formula {receptive_field(GeneratorConfig())}), "
                            f"D {rf_d} (formula {receptive_field(DiscriminatorConfig())}), {elapsed:.1f} s")
    assert rf_g == receptive_field(GeneratorConfig()) == 6139
    assert rf_d == receptive_field(DiscriminatorConfig()) == 111
    assert elapsed < 120


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5, "overfit: 500 steps reach 20% of the initial loss")
def test_overfit(record_property, overfit):
    trainer, reports, elapsed = overfit
    first, last = reports[0].losses["recon"], reports[-1].losses["recon"]
    assert all(r.losses["g_total"] == r.losses["recon"] for r in reports)
    detail(record_property, f"{first:.3f} -> {last:.3f} ({100 * last / first:.1f}%), {elapsed:.0f} s")
    assert len(reports) == 500
    assert last <= 0.2 * first
    assert elapsed < 600


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6, "mixup endpoints and multi-singer additivity")
def test_mixup_endpoints(record_property):
    model = SVCModel(tiny_model_config(), ["j", "k"], seed=8)
    rng = np.random.default_rng(8)
    frames = 6
    bundle = FeatureBundle(rng.standard_normal((1, frames)), rng.standard_normal((40, frames)),
                           rng.standard_normal((256, frames)))
    z = rng.uniform(size=frames * 256)
    vj, vk = model.embedding("j"), model.embedding("k")
    with ad.no_grad():
        single_j = model.generate(bundle, z, vj).data
        single_k = model.generate(bundle, z, vk).data
        nu1 = model.generate(bundle, z, mixup_embedding(vj, vk, 1.0)).data
        nu0 = model.generate(bundle, z, mixup_embedding(vj, vk, 0.0)).data
        half = model.generate(bundle, z, mixup_embedding(vj, vk, 0.5)).data
    assert np.array_equal(nu1, single_j) and np.array_equal(nu0, single_k)
    assert not np.array_equal(half, single_j)

    branches = [{"d": 0.5, "recon": 1.25, "adv": 0.75, "pitch_perc": 0.5, "phon_perc": 0.25},
                {"d": 1.5, "recon": 7.0, "adv": 0.5, "pitch_perc": 0.25, "phon_perc": 0.125},
                {"d": 0.25, "recon": 2.0, "adv": 1.0, "pitch_perc": 2.0, "phon_perc": 0.5}]
    d, g = L.multi_singer_totals(*branches)
    parts = [L.multi_singer_totals(branches[0], None, None), L.multi_singer_totals(None, branches[1], None),
             L.multi_singer_totals(None, None, branches[2])]
    assert d == sum(p[0] for p in parts) and g == sum(p[1] for p in parts)
    assert parts[1][1] == L.unaligned_generator_loss(0.5, 0.25, 0.125)
    detail(record_property, f"nu=1/nu=0 bit-exact, totals D {d} G {g}")


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7, "pitch pipeline: tracker, excitation, VDE/FFE")
def test_pitch_pipeline(record_property):
    worst = 0.0
    for f in np.geomspace(80, 600, 15):
        w = Waveform(sine(f), SR)
        tr = dsp.estimate_f0(w, dsp.FrameGrid.for_waveform(w))
        inner = tr.f0_hz[4:-4]
        assert np.all(inner > 0)
        worst = max(worst, float(np.max(np.abs(inner - f) / f)))
    assert worst <= 0.01

    n_frames, fft = 64, 4096
    bin_err = 0
    for f in (110.0, 330.0, 587.0):
        track = dsp.F0Track(np.full(n_frames, f), np.ones(n_frames), dsp.FrameGrid(1024, 256, n_frames, SR))
        ex = dsp.synthesize_excitation(track).samples
        spec = np.abs(np.fft.rfft(ex[:fft] * np.hanning(fft)))
        bin_err = max(bin_err, abs(int(np.argmax(spec)) - f * fft / SR))
    assert bin_err <= 1

    ref = Waveform(sine(220.0), SR)
    hyp = Waveform(sine(286.0), SR)
    a, b = (dsp.estimate_f0(w, dsp.FrameGrid.for_waveform(w)) for w in (ref, hyp))
    voiced = a.voiced & b.voiced
    shifted = evaluate_tracks(_only(a, voiced), _only(b, voiced))
    same = evaluate_waveforms(ref, ref)
    detail(record_property, f"tracker worst {100 * worst:.2f}%, excitation bin error {bin_err:.2f}, "
                            f"+30% FFE {shifted.ffe:.2f}, identical VDE/FFE {same.vde}/{same.ffe}")
    assert shifted.ffe == 1.0 and shifted.vde == 0.0
    assert same.vde == 0.0 and same.ffe == 0.0


def _only(track, mask):
    return dsp.F0Track(track.f0_hz[mask], track.confidence[mask], track.grid.with_frames(int(mask.sum())))


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8, "determinism and persistence")
def test_determinism_and_persistence(record_property, tmp_path):
    with ad.precision("f64"):
        runs = []
        for _ in range(2):
            t = make_trainer(seed=12)
            runs.append([t.training_step().as_log() for _ in range(10)])
        assert runs[0] == runs[1]

        straight = make_trainer(seed=12)
        for _ in range(10):
            straight.training_step()
        half = make_trainer(seed=12)
        for _ in range(5):
            half.training_step()
        save_checkpoint(tmp_path / "mid.svck", half.to_bundle())
        resumed = make_trainer(seed=77)
        resumed.load_bundle(load_checkpoint(tmp_path / "mid.svck"))
        for _ in range(5):
            resumed.training_step()
        a, b = straight.model.parameters(), resumed.model.parameters()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

        save_checkpoint(tmp_path / "end.svck", resumed.to_bundle())
        back = load_checkpoint(tmp_path / "end.svck")
        orig = resumed.to_bundle()
        assert back.step == orig.step and back.rng_state == orig.rng_state
        assert all(back.tensors[k].tobytes() == v.tobytes() for k, v in orig.tensors.items())

    tracks = straight.corpus.utterances[0].tracks
    save_tracks(tmp_path / "feats", "u", tracks)
    again = load_tracks(tmp_path / "feats", "u")
    save_tracks(tmp_path / "feats2", "u", again)
    for kind in ("phonetic", "f0", "loudness"):
        assert (tmp_path / "feats" / f"u.{kind}.svcf").read_bytes() == (tmp_path / "feats2" / f"u.{kind}.svcf").read_bytes()
    detail(record_property, "10-step logs identical, 5+5 resume == 10, checkpoint and SVCF bit-exact")


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9, "streaming equals offline conversion")
def test_streaming_equivalence(record_property):
    model = SVCModel(tiny_model_config(), ["a", "b"], seed=21)
    conv = Converter(model, seed=5, speaker="b")
    w = Waveform(harmonic_clip(48000, 247.0, seed=9), SR)
    offline = conv.convert(w).samples
    worst, rtfs = 0.0, []
    for chunk, feed in ((1024, 1000), (4096, 333), (512, 8000)):
        streamed, rtf = convert_chunked(conv, w, chunk, feed)
        assert len(streamed) == len(offline)
        worst = max(worst, float(np.max(np.abs(streamed.samples - offline))))
        rtfs.append(rtf)
    detail(record_property, f"max |diff| {worst:.1e}, RTF {', '.join(f'{r:.2f}' for r in rtfs)} "
                            f"(chunks 1024/4096/512, tiny model)")
    assert worst <= 1e-5
