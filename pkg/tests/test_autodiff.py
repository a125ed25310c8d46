import io
import struct

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from nsynth_forge.autodiff import (BASELINE_SCHEDULE, WAVENET_SCHEDULE, Adam, BatchNormState, LrSchedule, Tensor,
                                   avg_pool1d, batch_norm, concat, conv1d, conv2d, conv2d_transpose, dense,
                                   gradcheck, lr_at, nn_upsample1d, no_grad, read_checkpoint, sigmoid_ce,
                                   softmax_ce, write_checkpoint)

TOL = 1e-4


def rand(*shape, seed=0, lo=-1.0, hi=1.0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, shape), requires_grad=True)


def weighted_sum(out: Tensor, seed=99) -> Tensor:
    # a fixed random projection makes every output element matter
    r = np.random.default_rng(seed).normal(size=out.shape)
    return (out * r).sum()


# naive loop references
def conv1d_loop(x, w, b, dilation, causal):
    B, C, T = x.shape
    O, _, K = w.shape
    total = (K - 1) * dilation
    left = total if causal else total // 2
    out = np.zeros((B, O, T))
    for bi in range(B):
        for o in range(O):
            for t in range(T):
                acc = b[o] if b is not None else 0.0
                for k in range(K):
                    src = t - left + k * dilation
                    if 0 <= src < T:
                        acc += np.dot(w[o, :, k], x[bi, :, src])
                out[bi, o, t] = acc
    return out


def conv2d_loop(x, w, stride):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    oh, ow = -(-H // stride[0]), -(-W // stride[1])
    ph = max((oh - 1) * stride[0] + kh - H, 0) // 2
    pw = max((ow - 1) * stride[1] + kw - W, 0) // 2
    out = np.zeros((B, O, oh, ow))
    for i in range(oh):
        for j in range(ow):
            for a in range(kh):
                for c in range(kw):
                    r, s = i * stride[0] + a - ph, j * stride[1] + c - pw
                    if 0 <= r < H and 0 <= s < W:
                        out[:, :, i, j] += x[:, :, r, s] @ w[:, :, a, c].T
    return out


@pytest.mark.parametrize("dilation,causal", [(1, True), (2, True), (4, False), (1, False)])
def test_conv1d_matches_loops(dilation, causal):
    x, w, b = rand(2, 3, 11, seed=1), rand(4, 3, 3, seed=2), rand(4, seed=3)
    out = conv1d(x, w, b, dilation=dilation, causal=causal)
    assert np.allclose(out.data, conv1d_loop(x.data, w.data, b.data, dilation, causal), atol=1e-12)


@pytest.mark.parametrize("hw,k,s", [((8, 8), (5, 5), (2, 2)), ((7, 9), (4, 4), (2, 1)), ((6, 5), (1, 1), (1, 1))])
def test_conv2d_matches_loops(hw, k, s):
    x, w = rand(2, 3, *hw, seed=4), rand(5, 3, *k, seed=5)
    out = conv2d(x, w, stride=s)
    assert out.shape == (2, 5, -(-hw[0] // s[0]), -(-hw[1] // s[1]))
    assert np.allclose(out.data, conv2d_loop(x.data, w.data, s), atol=1e-12)


def test_conv2d_transpose_is_adjoint():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 8, 10))
    y = rng.normal(size=(2, 4, 4, 5))
    w = rng.normal(size=(4, 3, 5, 5))
    lhs = np.sum(conv2d(Tensor(x), Tensor(w)).data * y)
    # the same kernel array: conv2d reads it as (out, in), the transpose as (in, out)
    rhs = np.sum(x * conv2d_transpose(Tensor(y), Tensor(w), out_hw=(8, 10)).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    with pytest.raises(ValueError):
        conv2d_transpose(Tensor(y), Tensor(w), out_hw=(3, 3))


def test_batch_norm_forward_formula():
    x = rand(6, 3, 5, seed=7)
    g, b = rand(3, seed=8), rand(3, seed=9)
    st = BatchNormState(3, dtype=np.float64)
    out = batch_norm(x, g, b, st, training=True).data
    mu = x.data.mean(axis=(0, 2), keepdims=True)
    var = x.data.var(axis=(0, 2), keepdims=True)
    ref = g.data[None, :, None] * (x.data - mu) / np.sqrt(var + 1e-5) + b.data[None, :, None]
    assert np.allclose(out, ref, atol=1e-12)
    assert np.allclose(st.mean, 0.1 * mu.ravel())
    assert np.allclose(st.var, 0.9 + 0.1 * var.ravel())
    ev = batch_norm(x, g, b, st, training=False).data
    ref_ev = g.data[None, :, None] * (x.data - st.mean[None, :, None]) / np.sqrt(st.var[None, :, None] + 1e-5)
    assert np.allclose(ev, ref_ev + b.data[None, :, None], atol=1e-12)
    with pytest.raises(ValueError):
        batch_norm(rand(1, 3, 5), g, b, training=True)
    with pytest.raises(ValueError):
        batch_norm(x, g, b, None, training=False)


def test_pool_and_upsample_values():
    x = Tensor(np.arange(10.0).reshape(1, 1, 10))
    assert avg_pool1d(x, 4).data.ravel().tolist() == [1.5, 5.5, 4.25]
    assert avg_pool1d(x, 4, partial="drop").data.ravel().tolist() == [1.5, 5.5]
    assert avg_pool1d(x, 4, stride=3).data.ravel().tolist() == [1.5, 4.5, 7.5]
    assert nn_upsample1d(Tensor(np.array([[[1.0, 2.0]]])), 3).data.ravel().tolist() == [1, 1, 1, 2, 2, 2]


def test_losses_values():
    logits = Tensor(np.zeros((4, 88)))
    assert softmax_ce(logits, [0, 5, 10, 87]).item() == pytest.approx(np.log(88))
    assert sigmoid_ce(Tensor(np.zeros((2, 10))), np.ones((2, 10))).item() == pytest.approx(np.log(2))
    big = Tensor(np.array([[1000.0, -1000.0]]))
    assert softmax_ce(big, [0]).item() == pytest.approx(0.0)
    assert np.isfinite(sigmoid_ce(big, [[0.0, 1.0]]).item())
    with pytest.raises(ValueError):
        softmax_ce(logits, [0, 1, 2, 88])
    with pytest.raises(ValueError):
        sigmoid_ce(logits, np.zeros((4, 3)))


# every differentiable op, double precision, 50 random probes
GRAD_CASES = {
    "add_broadcast": lambda: (lambda a, b: weighted_sum(a + b), [rand(3, 4, seed=1), rand(4, seed=2)]),
    "sub_rsub": lambda: (lambda a, b: weighted_sum(a - b) + weighted_sum(2.0 - a, 5), [rand(3, 4, seed=1), rand(3, 1, seed=2)]),
    "mul": lambda: (lambda a, b: weighted_sum(a * b), [rand(3, 4, seed=1), rand(1, 4, seed=2)]),
    "div": lambda: (lambda a, b: weighted_sum(a / b), [rand(3, 4, seed=1), rand(3, 4, seed=2, lo=0.5, hi=2.0)]),
    "rdiv": lambda: (lambda a: weighted_sum(1.0 / a), [rand(5, seed=3, lo=0.5, hi=2.0)]),
    "pow": lambda: (lambda a: weighted_sum(a ** 3), [rand(5, 2, seed=4)]),
    "matmul": lambda: (lambda a, b: weighted_sum(a @ b), [rand(3, 5, seed=1), rand(5, 2, seed=2)]),
    "sum_mean": lambda: (lambda a: weighted_sum(a.sum(axis=1)) + a.mean() * 3.0, [rand(3, 4, seed=5)]),
    "reshape_transpose": lambda: (lambda a: weighted_sum(a.reshape(4, 6).transpose(1, 0)), [rand(2, 3, 4, seed=6)]),
    "getitem_slice": lambda: (lambda a: weighted_sum(a[:, 1:3]), [rand(3, 4, seed=7)]),
    "getitem_fancy": lambda: (lambda a: weighted_sum(a[np.array([0, 2, 0]), np.array([1, 1, 3])]), [rand(3, 4, seed=8)]),
    "exp_log_cos": lambda: (lambda a: weighted_sum(a.exp() + a.log() + a.cos()), [rand(6, seed=9, lo=0.2, hi=2.0)]),
    "tanh_sigmoid": lambda: (lambda a: weighted_sum(a.tanh() * a.sigmoid()), [rand(6, seed=10, lo=-3, hi=3)]),
    "relu_leaky": lambda: (lambda a: weighted_sum(a.relu() + a.leaky_relu(0.1)), [rand(20, seed=11)]),
    "clip": lambda: (lambda a: weighted_sum(a.clip(-0.5, 0.5)), [rand(20, seed=12)]),
    "concat": lambda: (lambda a, b: weighted_sum(concat([a, b], axis=1)), [rand(2, 3, seed=1), rand(2, 2, seed=2)]),
    "conv1d_causal": lambda: (lambda x, w, b: weighted_sum(conv1d(x, w, b, dilation=2, causal=True)),
                              [rand(2, 3, 12, seed=1), rand(4, 3, 2, seed=2), rand(4, seed=3)]),
    "conv1d_same": lambda: (lambda x, w: weighted_sum(conv1d(x, w, dilation=3)), [rand(2, 3, 12, seed=4), rand(2, 3, 3, seed=5)]),
    "conv1d_1x1": lambda: (lambda x, w: weighted_sum(conv1d(x, w)), [rand(2, 3, 7, seed=6), rand(5, 3, 1, seed=7)]),
    "conv2d": lambda: (lambda x, w, b: weighted_sum(conv2d(x, w, b, stride=(2, 2))),
                       [rand(2, 2, 7, 8, seed=1), rand(3, 2, 5, 5, seed=2), rand(3, seed=3)]),
    "conv2d_rect": lambda: (lambda x, w: weighted_sum(conv2d(x, w, stride=(2, 1))), [rand(1, 2, 6, 5, seed=4), rand(2, 2, 4, 4, seed=5)]),
    "conv2d_transpose": lambda: (lambda x, w, b: weighted_sum(conv2d_transpose(x, w, b, stride=(2, 2))),
                                 [rand(2, 3, 3, 4, seed=1), rand(3, 2, 5, 5, seed=2), rand(2, seed=3)]),
    "batch_norm_train": lambda: (lambda x, g, b: weighted_sum(batch_norm(x, g, b, training=True)),
                                 [rand(4, 3, 5, seed=1), rand(3, seed=2), rand(3, seed=3)]),
    "batch_norm_eval": lambda: (lambda x, g, b: weighted_sum(batch_norm(x, g, b, _eval_state(), training=False)),
                                [rand(4, 3, 5, seed=1), rand(3, seed=2), rand(3, seed=3)]),
    "batch_norm_2d": lambda: (lambda x, g, b: weighted_sum(batch_norm(x, g, b, training=True)),
                              [rand(3, 2, 4, 3, seed=4), rand(2, seed=5), rand(2, seed=6)]),
    "avg_pool_pad": lambda: (lambda x: weighted_sum(avg_pool1d(x, 4)), [rand(2, 3, 10, seed=1)]),
    "avg_pool_drop": lambda: (lambda x: weighted_sum(avg_pool1d(x, 4, partial="drop")), [rand(2, 3, 10, seed=2)]),
    "avg_pool_overlap": lambda: (lambda x: weighted_sum(avg_pool1d(x, 4, stride=3)), [rand(2, 3, 10, seed=3)]),
    "upsample": lambda: (lambda x: weighted_sum(nn_upsample1d(x, 3)), [rand(2, 3, 4, seed=4)]),
    "dense": lambda: (lambda x, w, b: weighted_sum(dense(x, w, b)), [rand(4, 5, seed=1), rand(5, 3, seed=2), rand(3, seed=3)]),
    "softmax_ce": lambda: (lambda z: softmax_ce(z, [0, 3, 3, 1]), [rand(4, 5, seed=1, lo=-3, hi=3)]),
    "sigmoid_ce": lambda: (lambda z: sigmoid_ce(z, np.random.default_rng(2).random((4, 5))), [rand(4, 5, seed=3, lo=-3, hi=3)]),
}


def _eval_state():
    st = BatchNormState(3, dtype=np.float64)
    st.mean[:] = [0.1, -0.2, 0.3]
    st.var[:] = [0.5, 1.5, 2.0]
    return st


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_op(name):
    fn, inputs = GRAD_CASES[name]()
    assert all(t.data.dtype == np.float64 for t in inputs)
    err = gradcheck(lambda: fn(*inputs), inputs, n_probes=50)
    assert err < TOL, f"{name}: relative error {err:.2e}"


def test_gradcheck_catches_a_wrong_gradient():
    a = rand(5, seed=1)

    def bad():
        out = Tensor._make(a.data ** 2, (a,), lambda g: (g * a.data,))  # should be 2*a
        return out.sum()

    assert gradcheck(bad, [a], n_probes=10) > 0.1


def test_gradient_accumulates_over_reuse():
    a = rand(3, seed=2)
    ((a * a) + a).sum().backward()
    assert np.allclose(a.grad, 2 * a.data + 1)


def test_no_grad_builds_no_graph():
    a = rand(3)
    with no_grad():
        out = (a * 2).sum()
    assert not out.requires_grad


def _causal_stack(x, ws):
    h = x
    for d, w in ws:
        h = conv1d(h, w, dilation=d, causal=True).tanh()
    return h


def test_causal_conv_stack_perturbation():
    rng = np.random.default_rng(11)
    for trial in range(10):
        dil = [int(2 ** rng.integers(0, 4)) for _ in range(rng.integers(1, 5))]
        ws = [(d, Tensor(rng.normal(size=(3, 3, int(rng.integers(1, 4)))))) for d in dil]
        x = rng.normal(size=(1, 3, 40))
        base = _causal_stack(Tensor(x), ws).data
        j = int(rng.integers(0, 39))
        x2 = x.copy()
        x2[:, :, j + 1:] += rng.normal(size=x2[:, :, j + 1:].shape)
        pert = _causal_stack(Tensor(x2), ws).data
        assert np.array_equal(base[..., : j + 1], pert[..., : j + 1])
        assert not np.array_equal(base[..., j + 1:], pert[..., j + 1:])


def test_forward_backward_independent_of_thread_count():
    rng = np.random.default_rng(12)
    x0 = rng.normal(size=(4, 32, 300)).astype(np.float32)
    w0 = rng.normal(size=(64, 32, 2)).astype(np.float32)
    g0 = rng.normal(size=(4, 3, 20, 24)).astype(np.float32)
    k0 = rng.normal(size=(8, 3, 5, 5)).astype(np.float32)

    def run():
        x, w = Tensor(x0.copy(), requires_grad=True), Tensor(w0.copy(), requires_grad=True)
        g, k = Tensor(g0.copy(), requires_grad=True), Tensor(k0.copy(), requires_grad=True)
        out = (conv1d(x, w, dilation=4, causal=True) ** 2).sum() + (conv2d(g, k) ** 2).sum()
        out.backward()
        return out.data.copy(), x.grad.copy(), w.grad.copy(), g.grad.copy(), k.grad.copy()

    with threadpool_limits(1):
        one = run()
    with threadpool_limits(4):
        four = run()
    for a, b in zip(one, four):
        assert np.array_equal(a, b)


def test_adam_matches_closed_form_first_steps():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -0.25])
    opt.step()
    # after one step the bias-corrected update is lr * sign(g) (up to eps)
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)
    p.grad = np.array([0.5, -0.25])
    opt.step()
    assert np.allclose(p.data, [0.8, -1.8], atol=1e-7)


def test_adam_minimises_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        ((p - target) ** 2).sum().backward()
        opt.step()
    assert np.allclose(p.data, target, atol=1e-3)


def test_adam_rejects_shape_mismatch_and_skips_missing():
    p, q = Tensor(np.zeros(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"p": p, "q": q}, lr=0.1)
    p.grad = np.ones(2)
    opt.step()
    assert np.array_equal(q.data, [1.0, 1.0])
    p.grad = np.ones(3)
    with pytest.raises(ValueError):
        opt.step()


def test_schedules():
    assert lr_at(WAVENET_SCHEDULE, 0) == 2e-4
    assert lr_at(WAVENET_SCHEDULE, 119_999) == 2e-4
    assert lr_at(WAVENET_SCHEDULE, 120_000) == 6e-5
    assert lr_at(WAVENET_SCHEDULE, 180_000) == 2e-5
    assert lr_at(WAVENET_SCHEDULE, 240_000) == 6e-6
    assert lr_at(WAVENET_SCHEDULE, 10 ** 7) == 6e-6
    assert lr_at(BASELINE_SCHEDULE, 10 ** 6) == 1e-4
    with pytest.raises(ValueError):
        LrSchedule(((5, 1e-3),))
    with pytest.raises(ValueError):
        LrSchedule(((0, 1e-3), (0, 1e-4)))
    with pytest.raises(ValueError):
        LrSchedule(((0, 0.0),))


def test_adam_follows_schedule():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam({"p": p}, lr=LrSchedule(((0, 1e-2), (2, 1e-3))))
    rates = []
    for _ in range(4):
        p.grad = np.ones(1)
        rates.append(opt.step())
    assert rates == [1e-2, 1e-2, 1e-3, 1e-3]


def test_checkpoint_round_trip_and_layout():
    tensors = {"enc/w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32([1.5]), "s": np.float32(2.0)}
    buf = io.BytesIO()
    write_checkpoint(buf, tensors, {"kind": "toy", "n": 3})
    raw = buf.getvalue()
    assert raw[:5] == b"NSFG1"
    back, cfg = read_checkpoint(io.BytesIO(raw))
    assert cfg == {"kind": "toy", "n": 3}
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k]) and back[k].shape == np.shape(tensors[k])
    # a record written by hand decodes the same way
    rec = b"NSFG1" + struct.pack("<I", 1) + b"w" + struct.pack("<II", 1, 2) + struct.pack("<2f", 0.25, -4.0)
    t, c = read_checkpoint(io.BytesIO(rec))
    assert c is None and t["w"].tolist() == [0.25, -4.0]


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(io.BytesIO(b"NOPE!"))
    buf = io.BytesIO()
    write_checkpoint(buf, {"w": np.ones(4, np.float32)})
    with pytest.raises(ValueError, match="truncated"):
        read_checkpoint(io.BytesIO(buf.getvalue()[:-3]))
    path = tmp_path / "m.nsfg"
    write_checkpoint(path, {"w": np.ones(2, np.float32)})
    write_checkpoint(tmp_path / "m2.nsfg", {"w": np.ones(2, np.float32)})
    assert path.read_bytes() == (tmp_path / "m2.nsfg").read_bytes()
