import numpy as np
import pytest

from ptts.nn import ops
from ptts.nn.autograd import GraphError, Tensor, no_grad, same_padding
from ptts.nn.gradcheck import check_gradients, relative_error
from ptts.nn.layers import BiGRU, Conv1d, ConvBank, Dense


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


def weighted_sum(y):
    # fixed random projection so every output element matters
    w = np.random.default_rng(42).standard_normal(y.shape)
    return ops.total(ops.mul(y, w))


UNARY = {
    "relu": (ops.relu, False),
    "sigmoid": (ops.sigmoid, False),
    "softplus": (ops.softplus, False),
    "tanh": (ops.tanh, False),
    "exp": (ops.exp, False),
    "log": (ops.log, True),
    "square": (ops.square, False),
    "absolute": (ops.absolute, False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    fn, positive = UNARY[name]
    x = leaf(rng, 4, 5, positive=positive)
    if name in ("relu", "absolute"):
        x.data[np.abs(x.data) < 0.05] = 0.3   # stay clear of the kink
    errs = check_gradients(lambda: weighted_sum(fn(x)), [x], eps=1e-6)
    assert max(errs.values()) < 1e-6


@pytest.mark.parametrize("op", [ops.add, ops.sub, ops.mul, ops.div])
def test_binary_ops_with_broadcast(op, rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, positive=True)
    errs = check_gradients(lambda: weighted_sum(op(a, b)), [a, b], eps=1e-6)
    assert max(errs.values()) < 1e-6


def test_matmul_concat_take_getitem(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    idx = np.array([0, 2, 2, 1])

    def loss():
        y = ops.matmul(a, b)
        y = ops.concat([y, ops.exp(y)], axis=-1)
        y = ops.take(y, idx, axis=1)
        return ops.mean(ops.square(ops.getitem(y, (slice(None), slice(1, 3)))))

    errs = check_gradients(loss, [a, b], eps=1e-6)
    assert max(errs.values()) < 1e-6


def test_relu_subgradient_at_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ops.total(ops.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def naive_conv(x, w, b):
    k = w.shape[0]
    left, right = same_padding(k)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    out = np.zeros((x.shape[0], x.shape[1], w.shape[2]))
    for bi in range(x.shape[0]):
        for t in range(x.shape[1]):
            for j in range(k):
                out[bi, t] += xp[bi, t + j] @ w[j]
    return out + b


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 8])
def test_conv1d_matches_loop(k, rng):
    x, w, b = rng.standard_normal((2, 9, 3)), rng.standard_normal((k, 3, 4)), rng.standard_normal(4)
    y = ops.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(y, naive_conv(x, w, b), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3, 6])
def test_conv1d_gradients(k, rng):
    x, w, b = leaf(rng, 2, 7, 3), leaf(rng, k, 3, 2), leaf(rng, 2)
    errs = check_gradients(lambda: weighted_sum(ops.conv1d(x, w, b)), [x, w, b], eps=1e-6)
    assert max(errs.values()) < 1e-6


def naive_gru(x, w_x, w_h, b_x, b_h):
    hidden = w_h.shape[0]
    sig = lambda v: 1 / (1 + np.exp(-v))
    h = np.zeros((x.shape[0], hidden))
    out = []
    for t in range(x.shape[1]):
        gx = x[:, t] @ w_x + b_x
        gh = h @ w_h + b_h
        z = sig(gx[:, :hidden] + gh[:, :hidden])
        r = sig(gx[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
        n = np.tanh(gx[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
        h = z * h + (1 - z) * n
        out.append(h)
    return np.stack(out, axis=1)


def test_gru_matches_step_loop(rng):
    args = [rng.standard_normal(s) * 0.5 for s in [(2, 6, 3), (3, 12), (4, 12), (12,), (12,)]]
    y = ops.gru(*[Tensor(a) for a in args]).data
    np.testing.assert_allclose(y, naive_gru(*args), rtol=1e-12, atol=1e-12)


def test_gru_gradients(rng):
    tensors = [leaf(rng, *s) for s in [(2, 5, 3), (3, 9), (3, 9), (9,), (9,)]]
    errs = check_gradients(lambda: weighted_sum(ops.gru(*tensors)), tensors, eps=1e-6)
    assert max(errs.values()) < 1e-6


def test_bigru_respects_lengths(rng):
    layer = BiGRU(3, 4, 2, rng, np.float64)
    x = rng.standard_normal((1, 6, 3))
    lengths = np.array([4])
    padded = layer(Tensor(x), lengths).data[0, :4]
    trimmed = layer(Tensor(x[:, :4]), np.array([4])).data[0]
    np.testing.assert_allclose(padded, trimmed, atol=1e-12)


def test_layer_composite_gradients(rng):
    bank = ConvBank(3, 4, 3, rng, np.float64)
    conv = Conv1d(12, 4, 3, rng, np.float64)
    rnn = BiGRU(4, 3, 4, rng, np.float64)
    dense = Dense(4, 2, rng, np.float64)
    x = leaf(rng, 2, 6, 3)
    params = [x] + bank.parameters() + conv.parameters() + rnn.parameters() + dense.parameters()
    target = rng.standard_normal((2, 6, 2))

    def loss():
        h = ops.relu(conv(bank(x)))
        return ops.mean(ops.square(ops.sub(dense(rnn(h, np.array([6, 4]))), target)))

    errs = check_gradients(loss, params, eps=1e-6)
    assert max(errs.values()) < 1e-5


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array(3.0), requires_grad=True)
    ops.add(ops.mul(x, x), x).backward()
    assert x.grad == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.total(ops.mul(x, 2.0))
    with pytest.raises(GraphError):
        y.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ops.mul(x, 2.0).backward()


def test_relative_error_basics():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(np.sqrt(2))
