import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sttrack.engine import AdamW, Parameter, Tensor, backward, check_gradients, functional as F, nn, no_grad, tape
from sttrack.engine import serialization
from sttrack.engine import tensor as T
from sttrack.engine.rng import stream


def _p64(rng, *shape, scale=1.0):
    return Parameter(rng.normal(size=shape) * scale, dtype=np.float64)


# --- matmul ----------------------------------------------------------------
def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_projector_selects_row():
    out = Tensor([[1, 0], [0, 0]]) @ Tensor([[5, 6], [7, 8]])
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 2)).astype(np.float32)
    expected = [[sum(float(a[i, k]) * float(b[k, j]) for k in range(4)) for j in range(2)] for i in range(3)]
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, expected, rtol=1e-6, atol=1e-7)


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(3, 2\)"):
        Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((3, 2)))


# --- softmax -----------------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)


def test_softmax_matches_direct_formula():
    x = [1.0, 2.0, 3.0]
    z = sum(math.exp(v) for v in x)
    expected = [math.exp(v) / z for v in x]
    np.testing.assert_allclose(T.softmax(Tensor(np.array(x))).data, expected, atol=1e-7)


def test_softmax_axis_out_of_range():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-1e3, 1e3, width=32)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1, dtype=np.float64), 1.0, atol=1e-6)


# --- conv2d ------------------------------------------------------------------
def _conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[bi, oc, i, j] = acc
    return out


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_field():
    out = F.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out.data, 9.0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    expected = _conv_oracle(x, w, b, stride, pad)
    assert out.shape == expected.shape
    np.testing.assert_allclose(out.data, expected, atol=1e-5, rtol=1e-5)


def test_conv_output_extent_formula():
    out = F.conv2d(Tensor(np.zeros((1, 2, 11, 9))), Tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 3, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv_rejects_oversized_kernel():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# --- normalization and activations -------------------------------------------
def test_layer_norm_constant_slice_is_zero():
    np.testing.assert_array_equal(F.layer_norm(Tensor([1.0, 1.0, 1.0])).data, [0, 0, 0])


def test_layer_norm_moments():
    x = np.random.default_rng(0).normal(3, 5, size=(6, 32)).astype(np.float32)
    out = F.layer_norm(Tensor(x)).data.astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-4)


def test_layer_norm_other_axis():
    x = np.random.default_rng(1).normal(size=(5, 4, 3))
    out = F.layer_norm(Tensor(x), axis=1).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-9)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_batch_norm_frozen_identity_statistics():
    bn = nn.BatchNorm2d(3, frozen=True)
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 4)).astype(np.float32)
    bn.train()
    out = bn(Tensor(x)).data
    np.testing.assert_allclose(out, x, atol=1e-6)
    np.testing.assert_array_equal(bn.running_mean.data, 0)
    np.testing.assert_array_equal(bn.running_var.data, 1)


def test_batch_norm_training_updates_running_stats():
    bn = nn.BatchNorm2d(2)
    x = np.random.default_rng(3).normal(2.0, 1.0, size=(4, 2, 3, 3)).astype(np.float32)
    bn(Tensor(x))
    assert np.all(bn.running_mean.data > 0.1)


def test_batch_norm_eval_leaves_buffers():
    bn = nn.BatchNorm2d(2).eval()
    bn(Tensor(np.ones((1, 2, 2, 2))))
    np.testing.assert_array_equal(bn.running_mean.data, 0)


# --- backward ------------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = Parameter(np.random.default_rng(0).normal(size=(2, 3, 4)))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_quadratic():
    data = np.random.default_rng(1).normal(size=(5,))
    x = Parameter(data, dtype=np.float64)
    backward((x * x).sum() * 0.5)
    np.testing.assert_allclose(x.grad, data, rtol=1e-12)


def test_backward_rejects_non_scalar():
    x = Parameter(np.ones(3))
    with pytest.raises(ValueError):
        backward(x * 2)


def test_backward_disconnected_parameter_gets_exact_zero():
    x = Parameter(np.ones(3))
    unused = Parameter(np.ones(2))
    backward((x * 3).sum(), [x, unused])
    np.testing.assert_array_equal(unused.grad, 0)
    assert unused.grad.shape == (2,)


def test_tape_is_reverse_execution_order_each_once():
    x = Parameter(np.ones(3))
    a = x * 2
    b = a + x
    c = (b * a).sum()
    order = tape(c)
    assert [t.node.op for t in order] == ["sum", "mul", "add", "mul"]
    assert len({id(t) for t in order}) == len(order)
    seqs = [t.node.seq for t in order]
    assert seqs == sorted(seqs, reverse=True)


def test_no_grad_records_nothing():
    x = Parameter(np.ones(3))
    with no_grad():
        y = x * 2
    assert y.node is None and not y.requires_grad


def test_forward_outputs_finite():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    conv = nn.Conv2d(3, 4, 3, stream(0), padding=1)
    out = T.softmax(F.layer_norm(conv(x).reshape(2, -1)), axis=-1)
    assert np.all(np.isfinite(out.data))


# --- gradient checks of each op in isolation (float64) -------------------------
GRAD_TOL = 1e-4


def _assert_grads(fn, named):
    errors = check_gradients(fn, named, h=1e-3)
    assert max(errors.values()) <= GRAD_TOL, errors


def test_grad_elementwise_arithmetic():
    rng = np.random.default_rng(10)
    a, b = _p64(rng, 3, 4), _p64(rng, 4)
    c = Parameter(rng.uniform(1.0, 2.0, size=(3, 1)), dtype=np.float64)
    _assert_grads(lambda: ((a + b) * (a - c) / c - a**3 * 0.1).sum(), [("a", a), ("b", b), ("c", c)])


def test_grad_matmul_batched():
    rng = np.random.default_rng(11)
    a, b = _p64(rng, 2, 3, 4), _p64(rng, 4, 5)
    _assert_grads(lambda: ((a @ b) ** 2).sum(), [("a", a), ("b", b)])


def test_grad_unary():
    rng = np.random.default_rng(12)
    x = _p64(rng, 10)
    pos = Parameter(rng.uniform(0.5, 2.0, size=10), dtype=np.float64)
    _assert_grads(
        lambda: (T.exp(x * 0.3) + T.sigmoid(x) * T.softplus(x) + T.relu(x) * x + T.absolute(x)).sum()
        + (T.log(pos) * T.sqrt(pos)).sum(),
        [("x", x), ("pos", pos)],
    )


def test_grad_min_max_clamp():
    rng = np.random.default_rng(13)
    a, b = _p64(rng, 8), _p64(rng, 8)
    _assert_grads(
        lambda: (T.maximum(a, b) * 2 + T.minimum(a, b) ** 2 + T.clamp_min(a - b, 0.1)).sum(),
        [("a", a), ("b", b)],
    )


def test_grad_reductions_and_shapes():
    rng = np.random.default_rng(14)
    x = _p64(rng, 2, 3, 4)
    w = _p64(rng, 3, 2)

    def fn():
        y = x.transpose(0, 2, 1).reshape(8, 3) @ w
        z = T.concat([y, x[:, 1:3, :2].reshape(4, 2)], axis=0)
        idx = z[np.array([0, 3, 3, 5])]
        return (z.mean(axis=0) ** 2).sum() + (idx * idx).sum() + T.stack([x[0], x[1]], axis=0).sum(axis=(1, 2)).sum()

    _assert_grads(fn, [("x", x), ("w", w)])


def test_grad_softmax():
    rng = np.random.default_rng(15)
    x = _p64(rng, 3, 5)
    wts = rng.normal(size=(3, 5))
    _assert_grads(lambda: (T.softmax(x, axis=-1) * wts).sum() + (T.softmax(x, axis=0) ** 2).sum(), [("x", x)])


@pytest.mark.parametrize("stride,pad,mode", [(1, 1, "zeros"), (2, 1, "zeros"), (2, 0, "zeros"), (3, 2, "zeros"), (1, 1, "circular")])
def test_grad_conv2d(stride, pad, mode):
    rng = np.random.default_rng(16)
    x, w, b = _p64(rng, 2, 2, 5, 5), _p64(rng, 3, 2, 3, 3), _p64(rng, 3)
    wts = rng.normal(size=F.conv2d(x, w, b, stride, pad, mode).shape)
    _assert_grads(lambda: (F.conv2d(x, w, b, stride, pad, mode) * wts).sum(), [("x", x), ("w", w), ("b", b)])


def test_grad_linear():
    rng = np.random.default_rng(17)
    x, w, b = _p64(rng, 2, 3, 4), _p64(rng, 4, 5), _p64(rng, 5)
    _assert_grads(lambda: (F.linear(x, w, b) ** 2).sum(), [("x", x), ("w", w), ("b", b)])


def test_grad_layer_norm():
    rng = np.random.default_rng(18)
    x, g, b = _p64(rng, 3, 6), _p64(rng, 6), _p64(rng, 6)
    wts = rng.normal(size=(3, 6))
    _assert_grads(lambda: (F.layer_norm(x, g, b) * wts).sum(), [("x", x), ("g", g), ("b", b)])


@pytest.mark.parametrize("training", [True, False])
def test_grad_batch_norm(training):
    rng = np.random.default_rng(19)
    x, w, b = _p64(rng, 3, 2, 3, 3), _p64(rng, 2), _p64(rng, 2)
    wts = rng.normal(size=(3, 2, 3, 3))
    rm, rv = np.array([0.1, -0.2]), np.array([0.5, 2.0])

    def fn():
        return (F.batch_norm(x, w, b, rm.copy(), rv.copy(), training) * wts).sum()

    _assert_grads(fn, [("x", x), ("w", w), ("b", b)])


def test_grad_dropout_mask_is_fixed_per_call():
    x = _p64(np.random.default_rng(20), 20)

    def fn():
        return (F.dropout(x, 0.3, stream(0, 5), True) ** 2).sum()

    _assert_grads(fn, [("x", x)])


# --- AdamW -------------------------------------------------------------------
def _single(value, grad, **kw):
    p = Parameter(np.array([value], dtype=np.float64), dtype=np.float64)
    p.grad = np.array([grad], dtype=np.float64)
    opt = AdamW([{"params": [("p", p)], "lr": kw.pop("lr", 0.1)}], **kw)
    return p, opt


def test_adamw_zero_gradient_no_decay_is_noop():
    p, opt = _single(1.5, 0.0, weight_decay=0.0)
    opt.step()
    assert p.data[0] == 1.5


def test_adamw_single_step_matches_hand_execution():
    p, opt = _single(1.0, 1.0, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    opt.step()
    m = (1 - 0.9) * 1.0
    v = (1 - 0.999) * 1.0
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-12)
    assert p.data[0] - 1.0 == pytest.approx(-0.1, abs=1e-8)


def test_adamw_decay_only():
    p, opt = _single(2.0, 0.0, lr=0.1, weight_decay=0.01)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-12)


def test_adamw_leaves_gradients_untouched_and_counts_steps():
    p, opt = _single(1.0, 0.5)
    for k in range(1, 4):
        opt.step()
        assert opt.step_count == k
    assert p.grad[0] == 0.5
    assert opt.m["p"].shape == p.shape


def test_adamw_missing_gradient_names_parameter():
    p = Parameter(np.ones(2))
    opt = AdamW([{"params": [("encoder.w", p)], "lr": 0.1}])
    with pytest.raises(ValueError, match="encoder.w"):
        opt.step()


# --- determinism and persistence -----------------------------------------------
def _trajectory(seed):
    rng = stream(seed, 1)
    lin = nn.Linear(4, 3, rng)
    opt = AdamW([{"params": list(lin.named_parameters()), "lr": 0.01}])
    data = stream(seed, 2).normal(size=(16, 4)).astype(np.float32)
    for _ in range(5):
        lin.zero_grad()
        backward((lin(Tensor(data)) ** 2).mean())
        opt.step()
    return serialization.dumps(lin.state_dict())


def test_identical_seed_gives_identical_trajectory():
    assert _trajectory(7) == _trajectory(7)
    assert _trajectory(7) != _trajectory(8)


def test_weight_file_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32([1.5]), "s": np.float32(2.0)}
    path = tmp_path / "w.bin"
    serialization.save(tensors, path)
    loaded = serialization.load(path)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].tobytes() == np.asarray(tensors[k], dtype=np.float32).tobytes()
    serialization.save(loaded, tmp_path / "w2.bin")
    assert (tmp_path / "w2.bin").read_bytes() == path.read_bytes()


def test_weight_file_header_layout():
    blob = serialization.dumps({"x": np.zeros((2, 3), np.float32)})
    assert blob[:4] == b"STKW"
    assert struct.unpack("<II", blob[4:12]) == (1, 1)
    assert struct.unpack("<I", blob[12:16]) == (1,)
    assert blob[16:17] == b"x"
    assert struct.unpack("<III", blob[17:29]) == (2, 2, 3)
    assert len(blob) == 29 + 24


def test_weight_file_bad_magic():
    with pytest.raises(serialization.WeightFormatError, match="magic"):
        serialization.loads(b"NOPE" + bytes(8))


def test_weight_file_version_mismatch():
    blob = bytearray(serialization.dumps({}))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(serialization.WeightVersionError, match="version"):
        serialization.loads(bytes(blob))
