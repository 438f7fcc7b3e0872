import math

import numpy as np
import pytest

from spgra2seq import tensor as T
from spgra2seq.gradcheck import check, numeric_gradient, relative_error
from spgra2seq.optim import ParamStore, adam_step, clip_grad_norm
from spgra2seq.tensor import ShapeError, Tape, TapeError, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


# --- forward values -------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_matmul_identity():
    x = rng().normal(size=(3, 5)).astype(np.float32)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_conv2d_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 4.0))


def test_conv2d_matches_direct_loop():
    x = rng(1).normal(size=(2, 3, 6, 5))
    w = rng(2).normal(size=(4, 3, 2, 2))
    b = rng(3).normal(size=4)
    with T.precision(np.float64):
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((2, 4, 5, 4))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = (x[n, :, i:i + 2, j:j + 2] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_maxpool_drops_odd_edge():
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
    out = T.maxpool2x2(Tensor(x)).data
    np.testing.assert_array_equal(out[0, 0], [[6, 8], [16, 18]])


def test_softmax_normalised():
    x = Tensor(rng().normal(size=(4, 7)) * 30)
    s = T.softmax(x, axis=1).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_logsumexp_large_values_finite():
    out = T.logsumexp(Tensor([[1000.0, 1000.0]]), axis=1).data
    np.testing.assert_allclose(out, [1000 + math.log(2)], rtol=1e-6)


def test_sigmoid_extremes_finite():
    out = T.sigmoid(Tensor([-1e4, 0.0, 1e4])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [0, 0.5, 1], atol=1e-7)


def test_lstm_zero_fixed_point():
    z = lambda *s: Tensor(np.zeros(s))
    h, c = T.lstm_cell(z(2, 3), z(2, 4), z(2, 4), z(3, 16), z(4, 16), z(16))
    np.testing.assert_array_equal(h.data, 0)
    np.testing.assert_array_equal(c.data, 0)


def test_lstm_forget_gate_arithmetic():
    b = np.zeros(4)
    b[1] = 10.0  # forget gate of the single unit
    _, c = T.lstm_cell(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))),
                       Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), Tensor(b))
    expected = 1 / (1 + math.exp(-10))
    assert abs(float(c.data[0, 0]) - expected) < 1e-6
    assert abs(float(c.data[0, 0]) - 0.99995) < 1e-5


def test_batchnorm_inference_uses_running_stats():
    x = rng().normal(size=(4, 3)).astype(np.float32)
    rm = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    rv = np.array([4.0, 1.0, 0.25], dtype=np.float32)
    out = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, train=False).data
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-5), rtol=1e-5)


def test_batchnorm_train_updates_running_buffers():
    x = rng().normal(size=(8, 2)).astype(np.float32)
    rm = np.zeros(2, dtype=np.float32)
    rv = np.ones(2, dtype=np.float32)
    T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, train=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(0), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0), rtol=1e-5)


def test_batchnorm_train_needs_batch_of_two():
    with pytest.raises(ShapeError):
        T.batchnorm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    np.zeros(2, np.float32), np.ones(2, np.float32), train=True)


def test_float32_default_and_precision_context():
    assert Tensor([1.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_forward_primitive_dispatch():
    out = T.forward_primitive("relu", Tensor([-3.0, 3.0]))
    np.testing.assert_array_equal(out.data, [0, 3])
    with pytest.raises(ValueError):
        T.forward_primitive("nope", Tensor([1.0]))


# --- errors ---------------------------------------------------------------

@pytest.mark.parametrize("fn", [
    lambda: T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))),
    lambda: T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3)))),
    lambda: T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2)))),
    lambda: T.conv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2)))),
    lambda: T.lstm_cell(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))),
                        Tensor(np.ones((2, 8))), Tensor(np.ones((3, 12))), Tensor(np.ones(12))),
])
def test_shape_errors_name_the_op(fn):
    with pytest.raises(ShapeError) as e:
        fn()
    assert e.value.op in str(e.value)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = T.mul(x, x)
        with pytest.raises(ShapeError):
            y.backward()


def test_backward_twice_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.mul(x, x))
        loss.backward()
        with pytest.raises(TapeError):
            tape.backward(loss)


# --- gradients ------------------------------------------------------------

def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        T.reduce_sum(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2, 4, 6])


def test_unreachable_parameter_gets_no_gradient():
    x = Tensor([1.0], requires_grad=True)
    dead = Tensor([5.0], requires_grad=True)
    with Tape():
        _ = T.mul(dead, 2.0)
        T.reduce_sum(T.mul(x, 3.0)).backward()
    assert dead.grad is None
    np.testing.assert_allclose(x.grad, [3.0])


def test_constant_never_gets_gradient():
    c = Tensor([2.0])
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        T.reduce_sum(T.mul(x, c)).backward()
    assert c.grad is None


def test_stop_gradient_blocks_flow():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape():
        T.reduce_sum(T.mul(x, T.stop_gradient(x))).backward()
    np.testing.assert_allclose(x.grad, [1.5, -2.0])


def _cosine_loss(t):
    a, b = t["a"], t["b"]
    return T.div(T.reduce_sum(T.mul(a, b)), T.mul(T.l2_norm(a), T.l2_norm(b)))


def test_cosine_composite_gradient():
    errs = check(_cosine_loss, {"a": np.array([1.0, 2.0, 3.0]), "b": np.array([4.0, 5.0, 6.0])})
    assert max(errs.values()) < 1e-3


R = rng(42)
X34 = R.normal(size=(3, 4))
POS = R.uniform(0.5, 2.0, size=(3, 4))
W = R.normal(size=(3, 4))

PRIMITIVE_CASES = {
    "add": (lambda t: T.reduce_sum(T.mul(T.add(t["x"], t["y"]), t["w"])), {"x": X34, "y": R.normal(size=(4,))}),
    "sub": (lambda t: T.reduce_sum(T.mul(T.sub(t["x"], t["y"]), t["w"])), {"x": X34, "y": R.normal(size=(3, 1))}),
    "mul": (lambda t: T.reduce_sum(T.mul(T.mul(t["x"], t["y"]), t["w"])), {"x": X34, "y": R.normal(size=(3, 4))}),
    "div": (lambda t: T.reduce_sum(T.mul(T.div(t["x"], t["y"]), t["w"])), {"x": X34, "y": POS}),
    "relu": (lambda t: T.reduce_sum(T.mul(T.relu(t["x"]), t["w"])), {"x": X34 + np.sign(X34) * 0.05}),
    "sigmoid": (lambda t: T.reduce_sum(T.mul(T.sigmoid(t["x"]), t["w"])), {"x": X34}),
    "tanh": (lambda t: T.reduce_sum(T.mul(T.tanh(t["x"]), t["w"])), {"x": X34}),
    "exp": (lambda t: T.reduce_sum(T.mul(T.exp(t["x"]), t["w"])), {"x": X34}),
    "log": (lambda t: T.reduce_sum(T.mul(T.log(t["x"]), t["w"])), {"x": POS}),
    "matmul": (lambda t: T.reduce_sum(T.mul(T.matmul(t["x"], t["y"]), t["v"])),
               {"x": X34, "y": R.normal(size=(4, 2)), "v": R.normal(size=(3, 2))}),
    "matmul_batched": (lambda t: T.reduce_sum(T.mul(T.matmul(t["x"], t["y"]), t["v"])),
                       {"x": R.normal(size=(2, 3, 4)), "y": R.normal(size=(2, 4, 3)), "v": R.normal(size=(2, 3, 3))}),
    "concat": (lambda t: T.reduce_sum(T.mul(T.concat([t["x"], t["y"]], axis=0), t["v"])),
               {"x": X34, "y": R.normal(size=(2, 4)), "v": R.normal(size=(5, 4))}),
    "stack": (lambda t: T.reduce_sum(T.mul(T.stack([t["x"], t["y"]], axis=1), t["v"])),
              {"x": X34, "y": R.normal(size=(3, 4)), "v": R.normal(size=(3, 2, 4))}),
    "slice": (lambda t: T.reduce_sum(T.mul(t["x"][1:, ::2], t["v"])), {"x": X34, "v": R.normal(size=(2, 2))}),
    "reshape": (lambda t: T.reduce_sum(T.mul(T.reshape(t["x"], (2, 6)), t["v"])),
                {"x": X34, "v": R.normal(size=(2, 6))}),
    "transpose": (lambda t: T.reduce_sum(T.mul(T.transpose(t["x"]), t["v"])), {"x": X34, "v": R.normal(size=(4, 3))}),
    "reduce_sum": (lambda t: T.reduce_sum(T.mul(T.reduce_sum(t["x"], axis=1), t["v"])),
                   {"x": X34, "v": R.normal(size=(3,))}),
    "reduce_mean": (lambda t: T.reduce_sum(T.mul(T.reduce_mean(t["x"], axis=0), t["v"])),
                    {"x": X34, "v": R.normal(size=(4,))}),
    "reduce_max": (lambda t: T.reduce_sum(T.mul(T.reduce_max(t["x"], axis=1), t["v"])),
                   {"x": X34, "v": R.normal(size=(3,))}),
    "softmax": (lambda t: T.reduce_sum(T.mul(T.softmax(t["x"], axis=1), t["w"])), {"x": X34}),
    "log_softmax": (lambda t: T.reduce_sum(T.mul(T.log_softmax(t["x"], axis=1), t["w"])), {"x": X34}),
    "logsumexp": (lambda t: T.reduce_sum(T.mul(T.logsumexp(t["x"], axis=1), t["v"])),
                  {"x": X34, "v": R.normal(size=(3,))}),
    "l2_norm": (lambda t: T.reduce_sum(T.mul(T.l2_norm(t["x"], axis=1), t["v"])), {"x": X34, "v": R.normal(size=(3,))}),
    "conv2d": (lambda t: T.reduce_sum(T.mul(T.conv2d(t["x"], t["k"], t["b"]), t["v"])),
               {"x": R.normal(size=(2, 2, 5, 5)), "k": R.normal(size=(3, 2, 2, 2)), "b": R.normal(size=3),
                "v": R.normal(size=(2, 3, 4, 4))}),
    "conv2d_stride2": (lambda t: T.reduce_sum(T.mul(T.conv2d(t["x"], t["k"], t["b"], stride=2), t["v"])),
                       {"x": R.normal(size=(2, 2, 6, 6)), "k": R.normal(size=(3, 2, 2, 2)), "b": R.normal(size=3),
                        "v": R.normal(size=(2, 3, 3, 3))}),
    "maxpool2x2": (lambda t: T.reduce_sum(T.mul(T.maxpool2x2(t["x"]), t["v"])),
                   {"x": R.permutation(50).reshape(1, 2, 5, 5) * 0.1, "v": R.normal(size=(1, 2, 2, 2))}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    fn, inputs = PRIMITIVE_CASES[name]
    inputs = dict(inputs)
    if "v" not in inputs:   # elementwise cases weight the output with the fixed W
        inputs["w"] = W
    errs = check(fn, inputs, step=1e-3, wrt=[k for k in inputs if k not in ("w", "v")])
    assert max(errs.values()) <= 1e-3, errs


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradient(train):
    rm = np.zeros(3)
    rv = np.ones(3)
    v = R.normal(size=(4, 3, 2, 2))

    def fn(t):
        return T.reduce_sum(T.mul(T.batchnorm(t["x"], t["g"], t["b"], rm.copy(), rv.copy(), train=train), v))

    errs = check(fn, {"x": R.normal(size=(4, 3, 2, 2)), "g": R.normal(size=3), "b": R.normal(size=3)})
    assert max(errs.values()) <= 5e-3, errs


def test_lstm_gradients_every_weight():
    r = rng(7)
    inputs = {"x": r.normal(size=(2, 3)), "h": r.normal(size=(2, 4)), "c": r.normal(size=(2, 4)),
              "wx": r.normal(size=(3, 16)) * 0.5, "wh": r.normal(size=(4, 16)) * 0.5, "b": r.normal(size=16)}

    def fn(t):
        h, c = T.lstm_cell(t["x"], t["h"], t["c"], t["wx"], t["wh"], t["b"])
        return T.add(T.reduce_sum(h), T.mul(T.reduce_sum(c), 0.3))

    errs = check(fn, inputs, step=1e-3)
    assert max(errs.values()) <= 1e-3, errs


def test_lstm_per_row_bias_gradient():
    r = rng(8)
    inputs = {"x": r.normal(size=(2, 1)), "h": r.normal(size=(2, 2)), "c": r.normal(size=(2, 2)),
              "wx": r.normal(size=(1, 8)), "wh": r.normal(size=(2, 8)), "b": r.normal(size=(2, 8))}
    errs = check(lambda t: T.reduce_sum(T.lstm_cell(*[t[k] for k in ("x", "h", "c", "wx", "wh", "b")])[0]), inputs)
    assert max(errs.values()) <= 1e-3


def test_l2_norm_zero_vector_has_zero_gradient():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    with Tape():
        T.reduce_sum(T.l2_norm(x, axis=1)).backward()
    np.testing.assert_array_equal(x.grad, 0)


# --- gradcheck helpers ------------------------------------------------------

def test_numeric_gradient_of_quadratic():
    a = np.array([1.0, -2.0])
    g = numeric_gradient(lambda: float((a ** 2).sum()), a)
    np.testing.assert_allclose(g, [2.0, -4.0], rtol=1e-8)


def test_relative_error_scale():
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0
    assert abs(relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) - 0.2 / 2.2) < 1e-12


# --- optimizer ----------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    store = ParamStore()
    p = store.add("p", np.array([1.0]))
    p.grad = np.array([1.0], dtype=np.float32)
    adam_step(store, 1e-3)
    assert abs(float(p.data[0]) - (1 - 1e-3)) < 1e-6
    assert store.steps["p"] == 1


def test_adam_zero_gradient_leaves_parameter():
    store = ParamStore()
    p = store.add("p", np.array([0.7, -0.3]))
    p.grad = np.zeros(2, dtype=np.float32)
    before = p.data.copy()
    adam_step(store, 1e-2)
    np.testing.assert_array_equal(p.data, before)


def test_adam_reports_missing_gradient():
    store = ParamStore()
    store.add("a", np.ones(2))
    b = store.add("b", np.ones(2))
    b.grad = np.ones(2, dtype=np.float32)
    assert adam_step(store, 1e-3) == ["a"]


def test_adam_decreases_convex_quadratic():
    store = ParamStore()
    p = store.add("p", np.array([3.0, -2.0]))
    losses = []
    for _ in range(3):
        with Tape():
            loss = T.reduce_sum(T.mul(p, p))
            loss.backward()
        losses.append(float(loss.data))
        adam_step(store, 0.1)
        store.zero_grad()
    assert losses[0] > losses[1] > losses[2]


def test_param_store_rejects_duplicates_and_matches_moment_shapes():
    store = ParamStore()
    store.add("w", np.ones((2, 3)))
    with pytest.raises(KeyError):
        store.add("w", np.ones(1))
    assert store.m["w"].shape == store.v["w"].shape == (2, 3)


def test_clip_grad_norm():
    store = ParamStore()
    p = store.add("p", np.zeros(2))
    p.grad = np.array([3.0, 4.0], dtype=np.float32)
    assert abs(clip_grad_norm(store, 1.0) - 5.0) < 1e-9
    assert abs(float(np.linalg.norm(p.grad)) - 1.0) < 1e-5


def test_forward_deterministic():
    x = rng(3).normal(size=(2, 1, 8, 8)).astype(np.float32)
    w = rng(4).normal(size=(3, 1, 2, 2)).astype(np.float32)
    a = T.maxpool2x2(T.relu(T.conv2d(Tensor(x), Tensor(w)))).data
    b = T.maxpool2x2(T.relu(T.conv2d(Tensor(x), Tensor(w)))).data
    np.testing.assert_array_equal(a, b)
