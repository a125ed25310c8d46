import inspect

import numpy as np
import pytest

from nsynth_forge.autodiff import Adam, Tensor, gradcheck, write_checkpoint
from nsynth_forge.baseline import (Z_SIZES, BaselineAutoencoder, BaselineConfig, channel_schedule,
                                   reconstruct_audio, to_grid)
from nsynth_forge.dsp import SynthNoteSpec, synth_note
from nsynth_forge.rainbowgram import CqtConfig, cqt
from nsynth_forge.spectral import MagnitudePlane, StftConfig, log_power_magnitude, stft

SHIFT_PITCHES = (48, 52, 55, 60, 64, 67, 72)


def tiny(pc=False, rep="magnitude", z=16, dtype=np.float32):
    cfg = BaselineConfig(depth=3, channels=[4, 6, 8], z_dim=z, input_hw=(16, 32), fft_size=64, hop_size=16,
                         pitch_conditioning=pc, representation=rep)
    return BaselineAutoencoder(cfg, seed=0, dtype=dtype)


def test_default_config_shape_arithmetic():
    c = BaselineConfig()
    assert c.channels == [128, 128, 256, 256, 512, 512, 1024, 1024, 1024, 1024]
    assert c.spatial_sizes()[0] == (256, 512) and c.spatial_sizes()[-1] == (1, 1)
    assert c.flat_dim == 1024 and c.z_dim == 1984
    assert channel_schedule(4, 16, 64) == [16, 16, 32, 32]
    with pytest.raises(ValueError):
        BaselineConfig(depth=3, channels=[1, 2])
    with pytest.raises(ValueError):
        BaselineConfig(representation="waveform")


@pytest.mark.parametrize("z", Z_SIZES)
def test_mirror_shape_law_for_every_code_size(z):
    # full depth and grid, narrow channels so the check stays cheap
    m = BaselineAutoencoder(BaselineConfig(channels=[2] * 10, z_dim=z), seed=0)
    x = np.random.default_rng(0).random((2, 1, 256, 512)).astype(np.float32)
    code = m.encode_tensor(Tensor(x))
    assert code.shape == (2, z)
    assert m.decode_tensor(code).shape == x.shape


def test_prepare_grid_from_four_second_note():
    m = BaselineAutoencoder(BaselineConfig(channels=[2] * 10), seed=0)
    grid, M = m.prepare_audio(synth_note(SynthNoteSpec(60, 100), duration_s=4.0))
    assert M.values.shape == (250, 513)
    assert grid.shape == (1, 256, 512)
    assert not grid[0, 250:].any()
    assert np.array_equal(grid[0, :250], M.values[:, :512].astype(np.float32))


def test_representations_channels():
    x = synth_note(SynthNoteSpec(60, 100), duration_s=0.1)
    for rep, ch in (("magnitude", 1), ("phase", 2), ("if", 2), ("real_imag", 2)):
        m = tiny(rep=rep)
        grid, _ = m.prepare_audio(x)
        assert grid.shape == (ch, 16, 32)
        assert np.isfinite(m.loss(grid[None].repeat(2, 0)).item())


def test_eval_mode_deterministic_and_code_size():
    m = tiny(z=64)
    g = np.random.default_rng(1).random((1, 16, 32))
    assert m.encode(g).shape == (64,)
    assert np.array_equal(m.encode(g), m.encode(g))
    assert np.array_equal(m.reconstruct(g).values, m.reconstruct(g).values)


def test_untrained_decoder_is_constant_half():
    m = tiny()
    out = m.decode(np.zeros(16)).values
    assert np.all(out == 0.5)
    out = m.decode(np.random.default_rng(2).normal(size=16)).values
    assert np.all(out == 0.5)
    with pytest.raises(ValueError):
        m.decode(np.zeros(15))


def test_loss_zero_on_identity_and_low_freq_weighting():
    m = tiny()
    t = np.random.default_rng(3).random((2, 1, 16, 32))
    assert m.loss_tensor(Tensor(t), t).item() == 0.0
    lo, hi = t.copy(), t.copy()
    lo[:, :, :, 0] += 0.1
    hi[:, :, :, 31] += 0.1  # bin 31 of a 64-point FFT sits at 7750 Hz
    assert m.loss_tensor(Tensor(lo), t).item() == pytest.approx(10 * m.loss_tensor(Tensor(hi), t).item())


def test_composed_graph_gradcheck():
    m = tiny(pc=True, dtype=np.float64)
    rng = np.random.default_rng(4)
    last = f"dec.{m.cfg.depth - 1}.w"
    m.params[last].data = rng.normal(scale=0.2, size=m.params[last].shape)
    m.params[last.replace(".w", ".b")].data[:] = 0.3  # keep the output away from the clip edges
    g = rng.random((3, 1, 16, 32))
    err = gradcheck(lambda: m.loss(g, [50, 60, 70], training=True), m.params, n_probes=50, eps=1e-5)
    assert err < 1e-4


def test_pitch_conditioning_census_and_errors():
    a, b = tiny(), tiny(pc=True)
    assert b.n_params() - a.n_params() == 88 * a.cfg.flat_dim
    with pytest.raises(ValueError):
        b.decode(np.zeros(16))
    with pytest.raises(ValueError):
        a.train_step(np.zeros((1, 1, 16, 32)), Adam(a.params))
    with pytest.raises(ValueError):
        a.encode_tensor(Tensor(np.zeros((2, 1, 8, 8))))


def test_fixed_code_decodes_distinct_planes_per_pitch():
    m = tiny(pc=True)
    rng = np.random.default_rng(5)
    grids = rng.random((8, 1, 16, 32)).astype(np.float32)
    pitches = rng.choice(SHIFT_PITCHES, 8)
    opt = Adam(m.params, lr=2e-3)
    for _ in range(30):
        m.train_step(grids, opt, pitches)
    z = m.encode(grids[0])
    planes = [m.decode(z, p).values for p in SHIFT_PITCHES]
    for i in range(7):
        for j in range(i + 1, 7):
            assert np.linalg.norm(planes[i] - planes[j]) > 0


def test_checkpoint_keeps_running_stats(tmp_path):
    m = tiny()
    g = np.random.default_rng(6).random((4, 1, 16, 32)).astype(np.float32)
    opt = Adam(m.params, lr=1e-3)
    for _ in range(3):
        m.train_step(g, opt)
    m.save(tmp_path / "b.nsfg")
    m2 = BaselineAutoencoder.load(tmp_path / "b.nsfg")
    assert np.array_equal(m.bn["enc.0"].mean, m2.bn["enc.0"].mean)
    assert np.array_equal(m.reconstruct(g[0]).values, m2.reconstruct(g[0]).values)
    write_checkpoint(tmp_path / "x.nsfg", {}, {"kind": "wavenet"})
    with pytest.raises(ValueError, match="not a baseline"):
        BaselineAutoencoder.load(tmp_path / "x.nsfg")


def test_reconstruct_audio_default_iterations():
    assert inspect.signature(reconstruct_audio).parameters["gl_iters"].default == 1000


def test_reconstruct_audio_keeps_cqt_pitch():
    x = synth_note(SynthNoteSpec(57, 100, 6, 1.0, 0), duration_s=2.0)
    M = log_power_magnitude(stft(x))
    y = reconstruct_audio(M, gl_iters=60, seed=0)
    cfg = CqtConfig()

    def peak(a):
        return int(np.argmax(np.abs(cqt(a, cfg)).mean(axis=0)))

    assert peak(x) == peak(y) == cfg.bin_of_pitch(57)


def test_reconstruct_audio_silence_and_metadata():
    cfg = StftConfig(256, 64)
    plane = MagnitudePlane(np.zeros((20, 129)), "log_power", 0.0, -23.025850929940457, cfg, 20 * 64)
    y = reconstruct_audio(plane, gl_iters=5)
    assert np.sqrt(np.mean(y ** 2)) < 1e-4
    with pytest.raises(ValueError):
        reconstruct_audio(MagnitudePlane(np.zeros((20, 129)), "log_power", None, None, cfg), gl_iters=1)


def test_to_grid_crops_and_pads():
    v = np.arange(12.0).reshape(3, 4)
    g = to_grid(v, (4, 2))
    assert g.shape == (4, 2) and g[3].tolist() == [0, 0] and g[0].tolist() == [0, 1]
