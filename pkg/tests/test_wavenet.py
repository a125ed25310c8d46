import numpy as np
import pytest

from nsynth_forge.autodiff import Adam, Tensor, avg_pool1d, gradcheck, nn_upsample1d, no_grad
from nsynth_forge.dsp import SynthNoteSpec, mulaw_encode, synth_note
from nsynth_forge.wavenet import (WavenetAutoencoder, WavenetDecoderConfig, WavenetEncoderConfig, interpolate,
                                  pitch_onehot, shifted_onehot)


def small(pc=False, stride=16, dtype=np.float32, seed=0, enc_dil=(1, 2, 4), dec_dil=(1, 2, 4, 8)):
    enc = WavenetEncoderConfig(layers=len(enc_dil), channels=8, pool_stride=stride, embedding_dim=4,
                               dilation_pattern=list(enc_dil))
    dec = WavenetDecoderConfig(layers=len(dec_dil), residual_channels=8, skip_channels=12,
                               dilation_pattern=list(dec_dil), pitch_conditioning=pc)
    return WavenetAutoencoder(enc, dec, seed=seed, dtype=dtype)


def randomize_logits(m, seed=1):
    # the logit layer starts at zero; give it weights so logits depend on the input
    rng = np.random.default_rng(seed)
    for k in ("dec.logit.w", "dec.logit.b"):
        m.params[k].data = rng.normal(scale=0.3, size=m.params[k].shape).astype(m.dtype)


def test_config_defaults_and_validation():
    e, d = WavenetEncoderConfig(), WavenetDecoderConfig()
    assert e.layers == 30 and e.channels == 128 and e.pool_stride == 512 and e.embedding_dim == 16
    assert e.dilation_pattern == [2 ** (i % 10) for i in range(30)]
    assert d.quantization_levels == 256 and d.pitch_classes == 88
    with pytest.raises(ValueError):
        WavenetEncoderConfig(layers=3, dilation_pattern=[1, 2])
    with pytest.raises(ValueError):
        WavenetDecoderConfig(quantization_levels=512)


def test_embedding_shape_law():
    x = np.random.default_rng(0).uniform(-1, 1, 4000)
    m = small(stride=500)
    assert m.encode(x).shape == (8, 4)
    m = small(stride=1024)
    assert m.encode(x).shape == (3, 4)  # 3.9 truncates
    with pytest.raises(ValueError):
        m.encode(np.zeros(100))
    with pytest.raises(ValueError):
        m.encode(np.zeros(0))


def test_embedding_time_locality():
    m = small(stride=32, enc_dil=(1, 2, 4, 8))
    R = m.enc_cfg.receptive_field
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, 32 * 12)
    z = m.encode(x)
    t = 6
    lo, hi = t * 32 - R, t * 32 + 32 + R
    y = x.copy()
    y[:lo] = rng.uniform(-1, 1, lo)
    y[hi:] = rng.uniform(-1, 1, len(x) - hi)
    assert np.array_equal(m.encode(y)[t], z[t])
    # perturbing just inside the reach does move row t
    y = x.copy()
    y[lo] += 0.5
    assert not np.array_equal(m.encode(y)[t], z[t])


def test_pool_upsample_adjoint_recovers_z():
    z = np.random.default_rng(3).normal(size=(2, 4, 7))
    back = avg_pool1d(nn_upsample1d(Tensor(z), 16), 16, partial="drop").data
    assert np.allclose(back, z, atol=1e-15)


def test_shifted_onehot_and_pitch_onehot():
    oh = shifted_onehot(np.array([[5, 7, 9]]))
    assert not oh[0, :, 0].any()
    assert oh[0, 5, 1] == 1 and oh[0, 7, 2] == 1 and oh.sum() == 2
    p = pitch_onehot([21, 108])
    assert p[0, 0] == 1 and p[1, 87] == 1
    with pytest.raises(ValueError):
        pitch_onehot([20])


def test_untrained_ce_is_ln256():
    m = small()
    x = synth_note(SynthNoteSpec(60, 100), duration_s=0.05)[:800]
    assert m.loss(x[None]).item() == pytest.approx(np.log(256), abs=1e-5)


def test_decoder_causality_randomized():
    rng = np.random.default_rng(4)
    for trial in range(10):
        dil = tuple(int(2 ** rng.integers(0, 5)) for _ in range(rng.integers(1, 5)))
        m = small(pc=bool(trial % 2), dec_dil=dil, seed=trial, dtype=np.float64)
        randomize_logits(m, trial)
        x = rng.uniform(-1, 1, 160)
        z = m.encode(x)
        pitch = 60 if m.dec_cfg.pitch_conditioning else None
        base = m.decode_teacher_forced(x, z, pitch)
        j = int(rng.integers(0, 150))
        y = x.copy()
        y[j] = -y[j] if abs(y[j]) > 0.05 else 0.9
        pert = m.decode_teacher_forced(y, z, pitch)
        assert np.array_equal(base[: j + 1], pert[: j + 1])
        assert not np.allclose(base[j + 1], pert[j + 1])


def test_sampler_matches_teacher_forcing():
    m = small(pc=True, dtype=np.float64, dec_dil=(1, 2, 4, 8, 16))
    randomize_logits(m)
    z = np.random.default_rng(5).normal(size=(20, 4))
    audio, logits = m.sample(z, n_samples=300, pitch=64, seed=3, return_logits=True)
    assert audio.shape == (300,)
    codes = mulaw_encode(audio)[None].astype(np.int64)
    with no_grad():
        ref = m.decode_tensor(codes, Tensor(z.T[None].copy()), [64]).data[0].T
    assert np.max(np.abs(ref - logits)) < 1e-9


def test_sampler_batch_and_modes():
    m = small()
    randomize_logits(m)
    z = np.random.default_rng(6).normal(size=(2, 5, 4)).astype(np.float32)
    a1 = m.sample(z, mode="argmax")
    a2 = m.sample(z, mode="argmax", seed=99)
    assert a1.shape == (2, 80) and np.array_equal(a1, a2)
    s1, s2 = m.sample(z, seed=1), m.sample(z, seed=1)
    assert np.array_equal(s1, s2) and not np.array_equal(s1, m.sample(z, seed=2))
    # the batch is the same as running each item alone
    assert np.array_equal(m.sample(z[1], mode="argmax"), a1[1])
    with pytest.raises(ValueError):
        m.sample(z, n_samples=81)
    with pytest.raises(ValueError):
        m.sample(z, mode="beam")
    with pytest.raises(ValueError):
        small(pc=True).sample(z[0])


def test_parameter_census_for_conditioning():
    a, b = small(pc=False), small(pc=True)
    d = a.dec_cfg
    assert b.n_params() - a.n_params() == d.layers * 2 * d.residual_channels * 88
    x = np.zeros((1, 64), np.float32)
    with no_grad():
        la = a.decode_tensor(mulaw_encode(x).astype(np.int64), a.encode_tensor(Tensor(x)))
        lb = b.decode_tensor(mulaw_encode(x).astype(np.int64), b.encode_tensor(Tensor(x)), [60])
    assert la.shape == lb.shape == (1, 256, 64)
    with pytest.raises(ValueError):
        b.loss(x)


def test_decoder_rejects_short_embedding():
    m = small()
    with pytest.raises(ValueError):
        m.decode_teacher_forced(np.zeros(100), np.zeros((2, 4)))


def test_full_model_gradcheck():
    m = small(pc=True, dtype=np.float64, dec_dil=(1, 2))
    randomize_logits(m)
    x = np.random.default_rng(7).uniform(-0.8, 0.8, (2, 48))
    # encoder gradients are ~1e-6 here; a larger step keeps roundoff below the signal
    err = gradcheck(lambda: m.loss(x, [40, 70]), m.params, n_probes=50, eps=1e-4)
    assert err < 1e-4


def test_train_step_reduces_loss_and_guards_nan():
    m = small()
    x = np.stack([synth_note(SynthNoteSpec(p, 100), duration_s=0.02)[:320] for p in (48, 60)])
    opt = Adam(m.params, lr=3e-3)
    first = m.train_step(x, opt)
    assert first == pytest.approx(np.log(256), abs=1e-4)
    for _ in range(60):
        last = m.train_step(x, opt)
    assert np.isfinite(last) and last < first - 0.3
    m.params["dec.logit.b"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match="dec.logit.b"):
        m.train_step(x, opt)
    with pytest.raises(ValueError):
        m.train_step(np.zeros(10), opt)


def test_checkpoint_round_trip(tmp_path):
    m = small(pc=True, seed=3)
    randomize_logits(m)
    path = tmp_path / "wn.nsfg"
    m.save(path)
    m2 = WavenetAutoencoder.load(path)
    assert m2.dec_cfg == m.dec_cfg and m2.enc_cfg == m.enc_cfg
    z = np.random.default_rng(8).normal(size=(3, 4))
    assert np.array_equal(m.sample(z, pitch=50, seed=4), m2.sample(z, pitch=50, seed=4))
    m2.save(tmp_path / "again.nsfg")
    assert path.read_bytes() == (tmp_path / "again.nsfg").read_bytes()


def test_interpolate():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 10, 4))
    assert np.array_equal(interpolate(a, b, 0.0), a)
    assert np.array_equal(interpolate(a, b, 1.0), b)
    assert np.allclose(interpolate(a, a, 0.5), a)
    mid = np.linalg.norm(interpolate(a, b, 0.5), axis=1)
    assert np.all(mid <= np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)) + 1e-6)
    with pytest.raises(ValueError):
        interpolate(a, b[:5], 0.5)
    with pytest.raises(ValueError):
        interpolate(a, b, 1.5)
