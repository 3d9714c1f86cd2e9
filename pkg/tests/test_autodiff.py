import numpy as np
import pytest

from egad import autodiff as ad
from egad.autodiff import Tape, Tensor, no_grad
from egad.errors import NumericError, ShapeError
from gradcheck import analytic, max_rel_error

RNG = np.random.default_rng(1234)


def leaf(shape, scale=1.0, rng=RNG):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def _dot(out, w):
    # <out, w> as a scalar loss; random w exercises every output element
    return ad.sum(ad.dense(ad.reshape(out, (1, -1)), Tensor(w.reshape(-1, 1))))


# ----------------------------------------------------------------- dense

def test_dense_identity_weight():
    out = ad.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_dense_hand_product():
    out = ad.dense(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]), Tensor([1.0]))
    assert out.data.tolist() == [[12.0]]


def test_dense_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        ad.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))))


def test_dense_gradient_fd():
    x, w, b = leaf((3, 4)), leaf((4, 5)), leaf((5,))
    assert max_rel_error(lambda: ad.sum(ad.dense(x, w, b)), [x, w, b]) < 1e-6


# ------------------------------------------------------------------ conv

def test_conv_identity_kernel():
    x = RNG.normal(size=(2, 5, 5, 1))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_window_sums():
    out = ad.conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((3, 3, 1, 1))), 1).data[0, :, :, 0]
    assert out[1, 1] == out[1, 2] == out[2, 1] == out[2, 2] == 9
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4


def test_conv_matches_direct_loop():
    x = RNG.normal(size=(2, 7, 6, 3))
    k = RNG.normal(size=(4, 4, 3, 5))
    got = ad.conv2d(Tensor(x), Tensor(k), 2).data
    # direct sliding window with TF "same" padding: total = max((out-1)*s + k - n, 0), lo = total // 2
    def pads(n):
        out = -(-n // 2)
        total = max((out - 1) * 2 + 4 - n, 0)
        return out, total // 2, total - total // 2
    oh, th, bh = pads(7)
    ow, lw, rw = pads(6)
    xp = np.pad(x, ((0, 0), (th, bh), (lw, rw), (0, 0)))
    want = np.zeros((2, oh, ow, 5))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, 2 * i:2 * i + 4, 2 * j:2 * j + 4, :]
            want[:, i, j, :] = np.einsum("bhwc,hwco->bo", patch, k)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_stride_two_halves_mnist():
    out = ad.conv2d(Tensor(np.zeros((1, 28, 28, 1))), Tensor(np.zeros((4, 4, 1, 8))), 2)
    assert out.shape == (1, 14, 14, 8)


def test_conv_errors():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 1, 1))), 1)
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((3, 3, 1, 1))), 3)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient_fd(stride):
    x, k = leaf((2, 5, 6, 2)), leaf((3, 3, 2, 3))
    w = RNG.normal(size=ad.conv2d(x, k, stride).shape)
    assert max_rel_error(lambda: _dot(ad.conv2d(x, k, stride), w), [x, k]) < 1e-6


def test_tconv_shapes():
    k = Tensor(RNG.normal(size=(4, 4, 64, 128)))
    h = ad.conv2d_transpose(Tensor(RNG.normal(size=(1, 7, 7, 128))), k, 2)
    assert h.shape == (1, 14, 14, 64)
    k2 = Tensor(RNG.normal(size=(4, 4, 1, 64)))
    assert ad.conv2d_transpose(h, k2, 2).shape == (1, 28, 28, 1)


def test_tconv_zero_input():
    out = ad.conv2d_transpose(Tensor(np.zeros((2, 3, 3, 4))), Tensor(RNG.normal(size=(4, 4, 2, 4))), 2)
    assert not out.data.any()


@pytest.mark.parametrize("hw,kernel,stride", [((6, 6), 4, 2), ((7, 5), 3, 2), ((5, 5), 3, 1), ((8, 8), 4, 2)])
def test_adjoint_identity(hw, kernel, stride):
    x = RNG.normal(size=(2, *hw, 3))
    k = RNG.normal(size=(kernel, kernel, 3, 4))
    cx = ad.conv2d(Tensor(x), Tensor(k), stride).data
    y = RNG.normal(size=cx.shape)
    ty = ad.conv2d_transpose(Tensor(y), Tensor(k), stride, out_hw=hw).data
    assert abs(np.sum(cx * y) - np.sum(x * ty)) < 1e-10


def test_tconv_gradient_fd():
    y, k = leaf((2, 3, 3, 4)), leaf((4, 4, 2, 4))
    w = RNG.normal(size=(2, 6, 6, 2))
    assert max_rel_error(lambda: _dot(ad.conv2d_transpose(y, k, 2), w), [y, k]) < 1e-6


# ------------------------------------------------------------ batch norm

def _running(c):
    return {"mean": np.zeros(c), "var": np.ones(c)}


def test_batch_norm_standardises():
    x = RNG.normal(3.0, 5.0, size=(16, 6))
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), True, _running(6)).data
    assert np.abs(out.mean(axis=0)).max() < 1e-8
    assert np.abs(out.var(axis=0) - 1).max() < 1e-6


def test_batch_norm_constant_column_is_zero():
    x = np.c_[np.full(5, 2.5), RNG.normal(size=5)]
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, _running(2)).data
    assert np.all(out[:, 0] == 0.0)


def test_batch_norm_running_stats_and_infer():
    x = RNG.normal(2.0, 3.0, size=(8, 3))
    run = _running(3)
    ad.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), True, run, momentum=0.99)
    np.testing.assert_allclose(run["mean"], 0.01 * x.mean(axis=0))
    np.testing.assert_allclose(run["var"], 0.99 + 0.01 * x.var(axis=0))
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), False, run).data
    np.testing.assert_allclose(out, (x - run["mean"]) / np.sqrt(run["var"] + 1e-8))


def test_batch_norm_rejects_single_sample():
    with pytest.raises(ShapeError):
        ad.batch_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), True, _running(3))


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradient_fd(train):
    x, g, b = leaf((4, 3)), leaf((3,)), leaf((3,))
    w = RNG.normal(size=(4, 3))
    run = {"mean": RNG.normal(size=3), "var": RNG.uniform(0.5, 2, size=3)}

    def loss():
        return _dot(ad.batch_norm(x, g, b, train, {k: v.copy() for k, v in run.items()}), w)

    assert max_rel_error(loss, [x, g, b]) < 1e-6


def test_batch_norm_conv_gradient_fd():
    x, g, b = leaf((3, 2, 2, 2)), leaf((2,)), leaf((2,))
    w = RNG.normal(size=x.shape)
    assert max_rel_error(lambda: _dot(ad.batch_norm(x, g, b, True, _running(2)), w), [x, g, b]) < 1e-6


# --------------------------------------------------------------- dropout

def test_dropout_rate_zero_is_identity():
    x = Tensor(RNG.normal(size=(3, 4)))
    for train in (True, False):
        np.testing.assert_array_equal(ad.dropout(x, 0.0, train, np.random.default_rng(0)).data, x.data)


def test_dropout_infer_is_identity():
    x = Tensor(RNG.normal(size=(3, 4)))
    np.testing.assert_array_equal(ad.dropout(x, 0.2, False).data, x.data)


def test_dropout_statistics():
    x = np.ones(10**5)
    out = ad.dropout(Tensor(x), 0.2, True, np.random.default_rng(5)).data
    assert abs((out != 0).mean() - 0.8) < 0.01
    assert abs(out.mean() - 1.0) < 0.02
    assert np.allclose(out[out != 0], 1.25)


def test_dropout_rate_range():
    for rate in (-0.1, 1.0):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(np.ones(3)), rate, True, np.random.default_rng(0))


def test_dropout_gradient_uses_same_mask():
    x = leaf((5, 6))
    w = RNG.normal(size=(5, 6))
    loss = lambda: _dot(ad.dropout(x, 0.3, True, np.random.default_rng(9)), w)  # noqa: E731
    assert max_rel_error(loss, [x]) < 1e-6


# ----------------------------------------------------------- activations

def test_activation_values():
    assert ad.activation("leaky_relu", Tensor([-1.0])).data[0] == pytest.approx(-0.1)
    assert ad.activation("sigmoid", Tensor([0.0])).data[0] == 0.5
    assert ad.activation("tanh", Tensor([0.0])).data[0] == 0.0
    assert ad.activation("relu", Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]


def test_activation_unknown():
    with pytest.raises(ValueError):
        ad.activation("swish", Tensor([1.0]))


@pytest.mark.parametrize("kind", ad.ACTIVATIONS)
def test_activation_gradient_fd(kind):
    v = RNG.uniform(-3, 3, size=100)
    v[np.abs(v) < 1e-3] += 0.01  # keep clear of the kink at 0
    x = Tensor(v, requires_grad=True)
    # probe weights bounded away from 0 keep every gradient entry O(1)
    w = RNG.choice([-1.0, 1.0], 100) * RNG.uniform(0.5, 1.5, 100)
    assert max_rel_error(lambda: _dot(ad.activation(kind, x), w), [x]) < 1e-6


def test_relu_subgradient_zero_at_kink():
    x = Tensor(np.zeros(3), requires_grad=True)
    (g,) = analytic(lambda: ad.sum(ad.activation("relu", x)), [x])
    assert not g.any()


# ---------------------------------------------------------------- concat

def test_concat_values_and_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    assert ad.concat([a, b], axis=0).data.tolist() == [1.0, 2.0, 3.0]
    ga, gb = analytic(lambda: ad.sum(ad.concat([a, b], axis=0)), [a, b])
    assert ga.tolist() == [1.0, 1.0] and gb.tolist() == [1.0]


def test_concat_bigan_branch_widths():
    hx = Tensor(np.zeros((3, 64 * 7 * 7)))
    hz = Tensor(np.zeros((3, 512)))
    assert ad.concat([hx, hz], axis=1).shape == (3, 64 * 7 * 7 + 512)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_concat_gradient_fd():
    a, b = leaf((3, 2)), leaf((3, 4))
    w = RNG.normal(size=(3, 6))
    assert max_rel_error(lambda: _dot(ad.concat([a, b], axis=1), w), [a, b]) < 1e-6


# ------------------------------------------------------------ cross-entropy

def test_xent_logit_zero():
    assert ad.sigmoid_cross_entropy(Tensor([0.0]), 1.0).item() == pytest.approx(np.log(2), abs=1e-15)


def test_xent_extremes_stay_finite():
    assert ad.sigmoid_cross_entropy(Tensor([20.0]), 1.0).item() == pytest.approx(2.061153622e-9, rel=1e-8)
    assert ad.sigmoid_cross_entropy(Tensor([-20.0]), 1.0).item() == pytest.approx(20.0, rel=1e-8)
    huge = ad.sigmoid_cross_entropy(Tensor([1e4, -1e4]), np.array([1.0, 0.0]), reduction="none")
    assert np.all(np.isfinite(huge.data))


def test_xent_matches_naive_form():
    logits = np.linspace(-10, 10, 201)
    naive = -np.log(1 / (1 + np.exp(-logits)))
    got = ad.sigmoid_cross_entropy(Tensor(logits), 1.0, reduction="none").data
    assert np.max(np.abs(got - naive)) < 1e-9


def test_xent_rejects_soft_targets():
    with pytest.raises(ValueError):
        ad.sigmoid_cross_entropy(Tensor([0.0]), 0.5)


def test_xent_gradient_fd():
    l = leaf((7,), 3.0)
    t = (RNG.random(7) > 0.5).astype(float)
    assert max_rel_error(lambda: ad.sigmoid_cross_entropy(l, t), [l]) < 1e-6


# -------------------------------------------------------------------- L1

def test_l1_examples():
    assert ad.l1_distance(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert ad.l1_distance(Tensor([1.0, 2.0]), Tensor([0.0, 4.0])).item() == 3.0


def test_l1_symmetric_and_per_sample():
    a, b = RNG.normal(size=(4, 3, 2)), RNG.normal(size=(4, 3, 2))
    assert ad.l1_distance(Tensor(a), Tensor(b)).item() == ad.l1_distance(Tensor(b), Tensor(a)).item()
    per = ad.l1_distance(Tensor(a), Tensor(b), per_sample=True).data
    np.testing.assert_allclose(per, np.abs(a - b).sum(axis=(1, 2)))


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.l1_distance(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_l1_gradient_fd():
    a, b = leaf((3, 4)), leaf((3, 4))
    w = RNG.normal(size=3)
    assert max_rel_error(lambda: _dot(ad.l1_distance(a, b, per_sample=True), w), [a, b]) < 1e-6


# -------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = leaf((3, 2))
    (g,) = analytic(lambda: ad.sum(x), [x])
    assert np.array_equal(g, np.ones((3, 2)))


def test_backward_unreached_leaf_gets_zero():
    x, y = leaf((2,)), leaf((3,))
    gx, gy = analytic(lambda: ad.sum(x), [x, y])
    assert not gy.any()


def test_backward_non_scalar_rejected():
    x = leaf((2,))
    with Tape() as tape:
        out = ad.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_backward_twice_identical():
    x, w = leaf((3, 4)), leaf((4, 2))
    loss = lambda: ad.sum(ad.activation("tanh", ad.dense(x, w)))  # noqa: E731
    first = analytic(loss, [x, w])
    second = analytic(loss, [x, w])
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_tape_order_is_topological():
    x = leaf((2, 2))
    with Tape() as tape:
        ad.sum(ad.activation("relu", ad.scale(x, 3.0)))
    produced = set()
    for op in tape.ops:
        for t in op.inputs:
            assert t is x or id(t) in produced
        produced.add(id(op.out))


def test_gradient_accumulates_over_reuse():
    x = leaf((3,))
    (g,) = analytic(lambda: ad.add(ad.sum(x), ad.sum(ad.scale(x, 2.0))), [x])
    assert np.allclose(g, 3.0)


def test_no_grad_records_nothing():
    x = leaf((2,))
    with Tape() as tape, no_grad():
        ad.sum(x)
    assert len(tape) == 0


def test_non_finite_output_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        ad.scale(Tensor([1e308]), 1e10)
