import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechdep import tensor as T
from speechdep.gradcheck import grad_check
from speechdep.nn import Linear, Parameter
from speechdep.optim import Adam, MissingGradientError, clip_grad_norm
from speechdep.tensor import NumericError, ShapeError, TapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# matmul ---------------------------------------------------------------------

def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    out = T.matmul(Tensor(np.array([[1.0, 0], [0, 0]])), Tensor(np.array([[5.0, 6], [7, 8]])))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-12, rtol=0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# conv2d ---------------------------------------------------------------------

def test_conv2d_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))


def test_conv2d_stride_shape():
    out = T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=(2, 2))
    assert out.shape == (1, 2, 2)


def test_conv2d_nested_loops():
    rng = np.random.default_rng(1)
    x, k = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 2))
    sh, sw = 2, 1
    Ho, Wo = (7 - 3) // sh + 1, (6 - 2) // sw + 1
    ref = np.zeros((3, Ho, Wo))
    for o in range(3):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(2):
                    for u in range(3):
                        for v in range(2):
                            ref[o, i, j] += x[c, i * sh + u, j * sw + v] * k[o, c, u, v]
    out = T.conv2d(Tensor(x), Tensor(k), stride=(sh, sw))
    np.testing.assert_allclose(out.data, ref, atol=1e-12, rtol=0)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# lstm -----------------------------------------------------------------------

def _lstm_args(rng, d_in, H, scale=0.5):
    return (Tensor(rng.normal(size=d_in)), (Tensor(rng.normal(size=H)), Tensor(rng.normal(size=H))),
            Tensor(rng.normal(0, scale, (d_in, 4 * H))), Tensor(rng.normal(0, scale, (H, 4 * H))),
            Tensor(rng.normal(0, scale, 4 * H)))


def test_lstm_zero_weights():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=3))
    h, c = T.lstm_step(x, (T.zeros(2), T.zeros(2)), T.zeros((3, 8)), T.zeros((2, 8)), T.zeros(8))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_lstm_forget_saturation():
    rng = np.random.default_rng(3)
    x, (h, c), wih, whh, b = _lstm_args(rng, 3, 2)
    b.data[2:4] = 50.0                      # forget gate
    _, c2 = T.lstm_step(x, (h, c), wih, whh, b)
    z = x.data @ wih.data + h.data @ whh.data + b.data
    sig = lambda v: 1 / (1 + np.exp(-v))
    expect = c.data + sig(z[0:2]) * np.tanh(z[4:6])
    np.testing.assert_allclose(c2.data, expect, atol=1e-9)


def test_lstm_scalar_recomputation():
    rng = np.random.default_rng(4)
    x, (h, c), wih, whh, b = _lstm_args(rng, 3, 2)
    h2, c2 = T.lstm_step(x, (h, c), wih, whh, b)
    H = 2
    for j in range(H):
        def gate(k):
            col = k * H + j
            v = b.data[col]
            for i in range(3):
                v += x.data[i] * wih.data[i, col]
            for i in range(H):
                v += h.data[i] * whh.data[i, col]
            return v
        s = lambda v: 1.0 / (1.0 + np.exp(-v))
        i_, f_, g_, o_ = s(gate(0)), s(gate(1)), np.tanh(gate(2)), s(gate(3))
        cj = f_ * c.data[j] + i_ * g_
        assert abs(c2.data[j] - cj) < 1e-12
        assert abs(h2.data[j] - o_ * np.tanh(cj)) < 1e-12


def test_lstm_sequence_matches_steps_and_masks():
    rng = np.random.default_rng(5)
    B, Tn, D, H = 3, 5, 4, 3
    x = rng.normal(size=(B, Tn, D))
    wih, whh, b = rng.normal(0, .5, (D, 4 * H)), rng.normal(0, .5, (H, 4 * H)), rng.normal(0, .1, 4 * H)
    lens = np.array([5, 2, 4])
    out = T.lstm_sequence(Tensor(x @ wih + b), Tensor(whh), lens).data
    for r in range(B):
        h, c = T.zeros(H), T.zeros(H)
        for t in range(lens[r]):
            h, c = T.lstm_step(Tensor(x[r, t]), (h, c), Tensor(wih), Tensor(whh), Tensor(b))
            np.testing.assert_allclose(out[r, t], h.data, atol=1e-12)
        np.testing.assert_array_equal(out[r, lens[r]:], 0.0)


# reduce_max -----------------------------------------------------------------

def test_reduce_max_examples():
    np.testing.assert_array_equal(T.reduce_max(Tensor(np.array([[1.0, 5], [3, 2]])), axis=0).data, [3, 5])
    single = np.array([[7.0], [2.0]])
    np.testing.assert_array_equal(T.reduce_max(Tensor(single), axis=1).data, [7, 2])


def test_reduce_max_tie_goes_to_first():
    a = leaf([[2.0, 2.0]])
    T.backward(T.reduce_max(a, axis=1).sum())
    np.testing.assert_array_equal(a.grad, [[1.0, 0.0]])


def test_reduce_max_empty_axis():
    with pytest.raises(ShapeError):
        T.reduce_max(Tensor(np.ones((2, 0))), axis=1)


# backward -------------------------------------------------------------------

def test_backward_square_and_constant():
    x = leaf([1.0, -2.0, 3.0])
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])
    y = leaf([1.0, 2.0])
    z = leaf([3.0])
    T.backward((z * 2.0).sum() + (y * 0.0).sum())
    np.testing.assert_array_equal(y.grad, 0.0)


def test_backward_errors():
    a = leaf([1.0, 2.0])
    with pytest.raises(TapeError):
        T.backward(a * a)
    loss = (a * a).sum()
    T.backward(loss)
    with pytest.raises(TapeError):
        T.backward(loss)


def test_fanout_accumulates_exactly():
    rng = np.random.default_rng(6)
    v = rng.normal(size=4)
    x = leaf(v)
    c = Tensor(rng.normal(size=4))
    T.backward(T.tanh(x).sum() + (x * c).sum())
    xf, xg = leaf(v), leaf(v)
    T.backward(T.tanh(xf).sum())
    T.backward((xg * c).sum())
    assert np.array_equal(x.grad, xf.grad + xg.grad)


def test_nonfinite_is_an_error():
    with pytest.raises(NumericError):
        T.log(Tensor(np.zeros(2)))
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))


def test_no_implicit_broadcast():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones((2, 3, 1)))
    assert (Tensor(np.ones((2, 3))) + Tensor(np.ones(3))).shape == (2, 3)   # bias add


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with T.no_grad():
        b = a * 2.0
    assert not b.requires_grad


# grad_check -----------------------------------------------------------------

def test_gradcheck_linear_exact():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(3, 2)))
    x = leaf(rng.normal(size=(4, 3)))
    assert grad_check(lambda x: (x @ w).sum(), x) < 1e-9


def test_gradcheck_softmax_ce():
    rng = np.random.default_rng(8)
    z = leaf(rng.normal(size=(5, 4)))
    y = np.eye(4)[rng.integers(0, 4, 5)]
    assert grad_check(lambda z: -(T.log_softmax(z, axis=1) * Tensor(y)).sum(), z) < 1e-5


def test_gradcheck_detects_wrong_rule(monkeypatch):
    orig = T.tanh

    def bad_tanh(a):
        out = np.tanh(a.data)
        return T._result(out, (a,), lambda g: (g * (1.0 + out * out),))   # sign flipped
    monkeypatch.setattr(T, "tanh", bad_tanh)
    x = leaf(np.random.default_rng(9).normal(size=4))
    assert grad_check(lambda x: T.tanh(x).sum(), x) > 1e-2
    monkeypatch.setattr(T, "tanh", orig)


OPS = {
    "exp": lambda a: T.exp(a * 0.5),
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "relu": lambda a: T.relu(a) * a,
    "mul": lambda a: a * a * 0.3,
    "log_softmax": lambda a: T.log_softmax(a, axis=-1) * a,
    "reduce_max": lambda a: T.reduce_max(a, axis=0),
    "transpose": lambda a: T.tanh(a.transpose()) * 2.0,
    "mean": lambda a: T.mean(a * a, axis=1),
}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), op=st.sampled_from(sorted(OPS)))
def test_op_gradients_random(seed, op):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 4, size=2))
    x = leaf(rng.normal(size=shape))
    w = Tensor(rng.normal(size=OPS[op](Tensor(x.data)).shape))
    assert grad_check(lambda x: (OPS[op](x) * w).sum(), x) < 1e-4


# parameters and the optimiser ------------------------------------------------

def test_same_seed_same_init():
    a = Linear(5, 3, np.random.default_rng(11))
    b = Linear(5, 3, np.random.default_rng(11))
    assert np.array_equal(a.weight.data, b.weight.data)


def test_adam_hand_step():
    p = Parameter(np.array([0.5]))
    p.grad = np.array([1.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    m, v = 0.1 * 1.0, 0.001 * 1.0
    mhat, vhat = m / (1 - 0.9), v / (1 - 0.999)
    assert p.data[0] == pytest.approx(0.5 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8), abs=1e-15)


def test_adam_zero_grad_and_frozen():
    p = Parameter(np.array([1.0, 2.0]))
    q = Parameter(np.array([3.0]))
    q.trainable = False
    opt = Adam({"p": p, "q": q}, lr=0.1)
    for _ in range(5):
        p.grad = np.zeros(2)
        q.grad = np.ones(1)
        opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])
    assert np.array_equal(q.data, [3.0])


def test_adam_missing_grad():
    opt = Adam({"p": Parameter(np.ones(2))})
    with pytest.raises(MissingGradientError):
        opt.step()


def test_clip_grad_norm():
    p = Parameter(np.ones(4))
    p.grad = np.full(4, 3.0)
    total = clip_grad_norm({"p": p}, 1.0)
    assert total == pytest.approx(6.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)
