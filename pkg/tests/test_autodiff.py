import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oafkit import autodiff as ad
from oafkit.errors import InvalidConfig, ShapeError


def V(x, grad=True):
    return ad.Value(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_bce_at_zero_logit():
    assert math.isclose(float(ad.bce_with_logits(V([0.0]), [1.0]).data), math.log(2), rel_tol=1e-12)


def test_bce_extreme_logits_are_finite():
    z = V([1000.0, -1000.0, 50.0])
    loss = ad.bce_with_logits(z, [0.0, 1.0, 1.0])
    assert np.isfinite(loss.data) and float(loss.data) > 600
    ad.backward(loss)
    assert np.all(np.isfinite(z.grad))


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    w = V(np.ones((1, 1, 1, 1)))
    assert np.array_equal(ad.conv2d(V(x), w).data, x)


def test_dilated_1d_example():
    x = V(np.array([1, 2, 3, 4, 5], float).reshape(1, 1, 5, 1))
    w = V(np.ones((1, 1, 2, 1)))
    y = ad.conv2d(x, w, dilation=(2, 1))
    assert y.data.ravel().tolist() == [4, 6, 8]


def naive_conv(x, w, b, stride, pad, dil):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    ho = (h + 2 * pad[0] - dil[0] * (kh - 1) - 1) // stride[0] + 1
    wo = (wd + 2 * pad[1] - dil[1] * (kw - 1) - 1) // stride[1] + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for q in range(o):
            for y in range(ho):
                for z in range(wo):
                    acc = b[q]
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[q, ch, i, j] * xp[a, ch, y * stride[0] + i * dil[0], z * stride[1] + j * dil[1]]
                    out[a, q, y, z] = acc
    return out


@pytest.mark.parametrize("stride,pad,dil", [((1, 1), (1, 1), (1, 1)), ((2, 1), (0, 2), (1, 3)), ((1, 2), (3, 0), (2, 1))])
def test_conv_matches_naive_oracle(stride, pad, dil):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 9, 10))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    got = ad.conv2d(V(x), V(w), V(b), stride, pad, dil).data
    assert np.allclose(got, naive_conv(x, w, b, stride, pad, dil), atol=1e-12)


def test_dilation_one_bitwise_equals_plain_conv():
    rng = np.random.default_rng(2)
    x, w = V(rng.normal(size=(1, 2, 7, 7))), V(rng.normal(size=(3, 2, 3, 3)))
    assert np.array_equal(ad.conv2d(x, w, padding=1, dilation=1).data, ad.conv2d(x, w, padding=1).data)


def test_conv_errors():
    x = V(np.zeros((1, 1, 4, 4)))
    with pytest.raises(InvalidConfig):
        ad.conv2d(x, V(np.zeros((1, 1, 3, 3))), dilation=0)
    with pytest.raises(ShapeError):
        ad.conv2d(x, V(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv2d(x, V(np.zeros((1, 1, 3, 3))), dilation=3)


def test_maxpool_forward_and_grad_routing():
    x = V(np.array([[[[1.0, 3.0, 2.0, 2.0, 9.0]]]]))
    y = ad.maxpool2d(x, (1, 2))
    assert y.data.ravel().tolist() == [3.0, 2.0]
    ad.backward(ad.vsum(y))
    # ties go to the first element; the odd trailing column gets nothing
    assert x.grad.ravel().tolist() == [0, 1, 1, 0, 0]


def test_dropout():
    x = V(np.ones((200, 50)))
    assert ad.dropout(x, 0.5, train=False) is x
    y = ad.dropout(x, 0.25, train=True, rng=np.random.default_rng(0))
    kept = y.data != 0
    assert 0.7 < kept.mean() < 0.8
    assert np.allclose(y.data[kept], 1 / 0.75)
    for bad in (-0.1, 1.0):
        with pytest.raises(InvalidConfig):
            ad.dropout(x, bad, train=True, rng=np.random.default_rng(0))


def test_mean_grad():
    x = V(np.arange(6.0))
    ad.backward(ad.mean(x))
    assert np.allclose(x.grad, 1 / 6)


def test_sigmoid_grad_at_zero():
    x = V(0.0)
    ad.backward(ad.sigmoid(x))
    assert math.isclose(float(x.grad), 0.25)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        ad.backward(V(np.ones(3)) * 2.0)


def test_grad_check_sum_of_squares():
    x = V([1.0, 2.0, 3.0])
    err = ad.grad_check(lambda v: ad.vsum(v * v), x)
    assert np.allclose(x.grad, [2, 4, 6])
    assert err < 1e-6
    with pytest.raises(ShapeError):
        ad.grad_check(lambda v: v * v, V([1.0, 2.0]))


def test_grad_check_relu_away_from_kink():
    rng = np.random.default_rng(3)
    x = V(rng.normal(size=30))
    err = ad.grad_check(lambda v: ad.vsum(ad.relu(v) * 1.7), x, coord_filter=lambda i: abs(x.data[i]) > 0.1)
    assert err < 1e-4


def _composite(a, b, c):
    h = ad.tanh(a @ b) * ad.sigmoid(c)
    h = ad.concat([h, ad.exp(a[:, :2] * 0.1)], axis=1)
    return ad.mean(ad.softmax(h, axis=-1) * h) + ad.vsum(h.transpose(1, 0)[1]) / (1.5 + ad.power(c * c, 0.5).mean())


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, b, c = V(rng.normal(size=(3, 4))), V(rng.normal(size=(4, 5))), V(rng.normal(size=(5,)))
    # smooth graph: a larger step keeps round-off off the tiny gradient entries
    errs = ad.grad_check_params(lambda: _composite(a, b, c), {"a": a, "b": b, "c": c}, eps=1e-4)
    assert max(errs.values()) < 1e-6


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "matmul", "relu", "sigmoid", "tanh", "exp",
                                  "softmax", "mean", "reshape", "transpose", "getitem", "concat", "pow",
                                  "bmm", "maxpool", "mse_mask", "bce_mask", "lstm"])
def test_primitive_gradients(name):
    rng = np.random.default_rng(5)
    a = V(rng.normal(size=(3, 4)) + 0.05)
    b = V(rng.uniform(0.5, 2.0, size=(3, 4)))
    m = V(rng.normal(size=(4, 2)))
    t3 = V(rng.normal(size=(2, 3, 4)))
    u3 = V(rng.normal(size=(2, 4, 3)))
    wh = V(rng.normal(size=(1, 4)))
    target = rng.uniform(0.5, 2.0, size=(3, 4))
    mask = (rng.random((3, 4)) < 0.5).astype(float)
    fns = {
        "add": lambda: ad.vsum(ad.add(a, b[0]) ** 2),
        "sub": lambda: ad.vsum(ad.sub(a, b) ** 2),
        "mul": lambda: ad.vsum(ad.mul(a, b) * a),
        "div": lambda: ad.vsum(ad.div(a, b)),
        "matmul": lambda: ad.vsum(ad.tanh(a @ m)),
        "relu": lambda: ad.vsum(ad.relu(a) * b),
        "sigmoid": lambda: ad.vsum(ad.sigmoid(a) * b),
        "tanh": lambda: ad.vsum(ad.tanh(a) * b),
        "exp": lambda: ad.vsum(ad.exp(a) * b),
        "softmax": lambda: ad.vsum(ad.softmax(a, axis=0) * b),
        "mean": lambda: ad.vsum(ad.mean(a * b, axis=1, keepdims=True) ** 2),
        "reshape": lambda: ad.vsum(a.reshape(2, 6) * b.reshape(2, 6)),
        "transpose": lambda: ad.vsum(t3.transpose(0, 2, 1) @ t3),
        "getitem": lambda: ad.vsum(a[1:, ::2] * b[:2, 1:3]),
        "concat": lambda: ad.vsum(ad.concat([a, b * a], axis=0) ** 2),
        "pow": lambda: ad.vsum(ad.power(b, 1.5)),
        "bmm": lambda: ad.vsum(ad.tanh(t3 @ u3)),
        "maxpool": lambda: ad.vsum(ad.maxpool2d(t3.reshape(1, 2, 3, 4), (1, 2)) * 1.3),
        "mse_mask": lambda: ad.mse(a, target, mask=mask),
        "bce_mask": lambda: ad.bce_with_logits(a, (target > 1).astype(float), mask=mask),
        "lstm": lambda: ad.vsum(ad.lstm_recurrence(t3, wh, reverse=True) * 1.1),
    }
    params = {"a": a, "b": b, "m": m, "t3": t3, "u3": u3, "wh": wh}
    errs = ad.grad_check_params(fns[name], params, eps=1e-6)
    assert max(errs.values()) < 1e-5, errs


def test_stop_gradient_blocks():
    x = V([1.0, 2.0])
    y = ad.vsum(ad.stop_gradient(x) * x)
    ad.backward(y)
    assert np.allclose(x.grad, [1.0, 2.0])


def test_no_grad_records_nothing():
    x = V([1.0])
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad and ad.grad_enabled()


def test_tape_is_topological():
    x = V([1.0, 2.0])
    h = ad.tanh(x)
    y = ad.vsum(h * h + x)
    tape = ad.Tape.from_output(y)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is y


def test_deep_chain_does_not_recurse():
    x = V([0.5])
    y = x
    for _ in range(5000):
        y = y * 1.0001
    ad.backward(ad.vsum(y))
    assert math.isclose(float(x.grad[0]), 1.0001 ** 5000, rel_tol=1e-9)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_linearity_of_backward(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(3, 3))

    def grad_of(fn):
        x = V(data)
        ad.backward(fn(x))
        return x.grad

    f = lambda x: ad.vsum(ad.tanh(x) * x)  # noqa: E731
    g = lambda x: ad.mean(ad.sigmoid(x @ x))  # noqa: E731
    both = grad_of(lambda x: f(x) * alpha + g(x) * beta)
    sep = alpha * grad_of(f) + beta * grad_of(g)
    assert np.allclose(both, sep, rtol=1e-9, atol=1e-12)


def test_forward_determinism():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(2, 3, 8, 8)).astype(np.float32), rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = ad.conv2d(V(x), V(w), padding=1).data
    b = ad.conv2d(V(x), V(w), padding=1).data
    assert np.array_equal(a, b)


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.mse(V(np.zeros(3)), np.zeros(4))
    with pytest.raises(ShapeError):
        ad.bce_with_logits(V(np.zeros(3)), np.zeros(4))
    with pytest.raises(ShapeError):
        ad.lstm_recurrence(V(np.zeros((1, 2, 7))), V(np.zeros((2, 8))))


def test_grads_accumulate_and_broadcast():
    x = V(np.ones((2, 3)))
    b = V(np.zeros(3))
    ad.backward(ad.vsum(x + b))
    ad.backward(ad.vsum((x + b) * 2.0))
    assert np.allclose(b.grad, [6.0, 6.0, 6.0])
    assert np.allclose(x.grad, 3.0)
