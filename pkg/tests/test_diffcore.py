import numpy as np
import pytest

from m3s.diffcore import (
    EmptyBatch,
    Graph,
    NonFiniteInput,
    NonScalarRoot,
    ShapeMismatch,
    grad_check,
)


def central_diff(fn, x, h=1e-5):
    """Independent finite-difference gradient of a numpy scalar function."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def test_matmul_identity():
    g = Graph()
    a = np.arange(6.0).reshape(2, 3)
    out = g.matmul(g.const(a), g.const(np.eye(3)))
    np.testing.assert_array_equal(g.value(out), a)


def test_relu_definition():
    g = Graph()
    np.testing.assert_array_equal(g.value(g.relu(g.const([-1.0, 0.0, 2.0]))), [0.0, 0.0, 2.0])


def test_softmax_of_constant_row():
    g = Graph()
    out = g.value(g.softmax(g.const([7.5, 7.5, 7.5])))
    np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_is_stable_for_large_logits():
    g = Graph()
    out = g.value(g.softmax(g.const([1000.0, 1000.0])))
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_square_gradient_at_three():
    g = Graph()
    x = g.param(3.0)
    y = g.mul(x, x)
    assert g.backward(y)[x] == 6.0


def test_constant_node_gets_zero_gradient():
    g = Graph()
    x = g.param([1.0, 2.0])
    c = g.const([5.0, 5.0])
    unused = g.param([[1.0]])
    root = g.sum(g.square(x))
    grads = g.backward(root)
    np.testing.assert_array_equal(grads[c], [0.0, 0.0])
    np.testing.assert_array_equal(grads[unused], [[0.0]])
    assert grads[unused].shape == (1, 1)


def test_sum_of_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    A, B = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    g = Graph()
    a, b = g.param(A), g.param(B)
    grads = g.backward(g.sum(g.matmul(a, b)))
    np.testing.assert_allclose(grads[a], central_diff(lambda x: np.sum(x @ B), A), rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(grads[b], central_diff(lambda x: np.sum(A @ x), B), rtol=1e-8, atol=1e-9)


# per-op checks: builder(graph, ids) -> scalar root, parameter shapes, positive-only
def _ops():
    return {
        "matmul": (lambda g, ids: g.sum(g.matmul(ids["x"], ids["y"])), {"x": (3, 4), "y": (4, 2)}, False),
        "add": (lambda g, ids: g.sum(g.square(g.add(ids["x"], ids["y"]))), {"x": (3, 4), "y": (4,)}, False),
        "sub": (lambda g, ids: g.sum(g.square(g.sub(ids["x"], ids["y"]))), {"x": (3, 4), "y": (4,)}, False),
        "mul": (lambda g, ids: g.sum(g.mul(ids["x"], ids["y"])), {"x": (2, 3), "y": (2, 3)}, False),
        "scale": (lambda g, ids: g.sum(g.square(g.scale(ids["x"], -2.5))), {"x": (5,)}, False),
        "relu": (lambda g, ids: g.sum(g.square(g.relu(ids["x"]))), {"x": (4, 3)}, False),
        "tanh": (lambda g, ids: g.sum(g.tanh(ids["x"])), {"x": (4, 3)}, False),
        "concat": (
            lambda g, ids: g.sum(g.square(g.concat([ids["x"], ids["y"]]))),
            {"x": (3, 2), "y": (3, 4)},
            False,
        ),
        "sum": (lambda g, ids: g.sum(g.square(ids["x"])), {"x": (2, 2)}, False),
        "mean": (lambda g, ids: g.mean(g.square(ids["x"])), {"x": (3, 5)}, False),
        "square": (lambda g, ids: g.sum(g.square(ids["x"])), {"x": (6,)}, False),
        "log": (lambda g, ids: g.sum(g.log(ids["x"])), {"x": (2, 3)}, True),
        "softmax": (
            lambda g, ids: g.sum(g.mul(g.softmax(ids["x"]), g.const(np.linspace(-1, 1, 12).reshape(3, 4)))),
            {"x": (3, 4)},
            False,
        ),
        "log_softmax": (
            lambda g, ids: g.sum(g.mul(g.log_softmax(ids["x"]), g.const(np.linspace(-1, 1, 12).reshape(3, 4)))),
            {"x": (3, 4)},
            False,
        ),
    }


@pytest.mark.parametrize("seed, op", list(enumerate(sorted(_ops()))))
def test_each_op_matches_finite_differences_on_random_inputs(seed, op):
    build, shapes, positive = _ops()[op]
    rng = np.random.default_rng(seed)
    for trial in range(20):
        params = {}
        for k, shape in shapes.items():
            v = rng.uniform(-1, 1, shape)
            if op == "relu":
                # keep away from the kink so central differences are valid
                v = np.where(np.abs(v) < 0.05, 0.5, v)
            params[k] = np.abs(v) + 0.1 if positive else v
        report = grad_check(build, params, h=1e-5, tol=1e-4)
        assert report.passed, (op, trial, report)


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    g = Graph()
    w = g.param(rng.uniform(-1, 1, (5, 4)))
    x = g.const(rng.uniform(-1, 1, (7, 5)))
    root = g.mean(g.square(g.tanh(g.matmul(x, w))))
    first = g.backward(root)[w]
    for _ in range(3):
        assert np.array_equal(first, g.backward(root)[w])
        assert first.tobytes() == g.backward(root)[w].tobytes()


def test_parameter_gradients_have_parameter_shapes():
    g = Graph()
    w = g.param(np.ones((3, 2)))
    b = g.param(np.zeros(2))
    x = g.const(np.ones((4, 3)))
    grads = g.backward(g.sum(g.add(g.matmul(x, w), b)))
    assert grads[w].shape == (3, 2)
    assert grads[b].shape == (2,)
    np.testing.assert_array_equal(grads[b], [4.0, 4.0])


def test_shape_errors():
    g = Graph()
    with pytest.raises(ShapeMismatch):
        g.matmul(g.const(np.ones((2, 3))), g.const(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        g.add(g.const(np.ones((2, 3))), g.const(np.ones(2)))
    with pytest.raises(ShapeMismatch):
        g.add(g.const(np.ones((2, 3))), g.const(np.ones((3, 3))))
    with pytest.raises(ShapeMismatch):
        g.concat([g.const(np.ones((2, 3))), g.const(np.ones((3, 3)))])


def test_nonfinite_inputs_are_rejected():
    g = Graph()
    with pytest.raises(NonFiniteInput):
        g.const([1.0, np.nan])
    with pytest.raises(NonFiniteInput):
        g.param([np.inf])
    with pytest.raises(NonFiniteInput):
        g.log(g.const([0.0, 1.0]))


def test_zero_length_batch_rejected():
    g = Graph()
    with pytest.raises(EmptyBatch):
        g.const(np.zeros((0, 3)))


def test_backward_needs_scalar_root():
    g = Graph()
    x = g.param([1.0, 2.0])
    with pytest.raises(NonScalarRoot):
        g.backward(g.square(x))


def test_values_are_immutable():
    g = Graph()
    x = g.param([1.0, 2.0])
    with pytest.raises(ValueError):
        g.value(x)[0] = 5.0


class TestGradCheck:
    def test_linear_function_is_exact(self):
        c = np.array([0.5, -2.0, 3.0])
        report = grad_check(lambda g, ids: g.sum(g.mul(g.const(c), ids["t"])), {"t": np.array([1.0, 2.0, -1.0])})
        assert report.max_rel_error < 1e-9

    def test_square_at_one(self):
        # f(t) = t^2 at t = 1: fd must sit within 1e-8 of 2t = 2
        h = 1e-5
        fd = ((1 + h) ** 2 - (1 - h) ** 2) / (2 * h)
        assert abs(fd - 2.0) < 1e-8
        report = grad_check(lambda g, ids: g.sum(g.square(ids["t"])), {"t": np.array([1.0])}, h=h)
        assert report.max_rel_error < 1e-8

    def test_two_layer_tanh_net_with_fifty_params(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (6, 5))
        y = rng.uniform(-1, 1, (6, 1))
        params = {
            "W1": rng.uniform(-1, 1, (5, 7)),
            "b1": rng.uniform(-1, 1, 7),
            "W2": rng.uniform(-1, 1, (7, 1)),
            "b2": rng.uniform(-1, 1, 1),
        }
        assert sum(v.size for v in params.values()) == 50

        def net(g, ids):
            h = g.tanh(g.add(g.matmul(g.const(x), ids["W1"]), ids["b1"]))
            out = g.add(g.matmul(h, ids["W2"]), ids["b2"])
            return g.mean(g.square(g.sub(out, g.const(y))))

        report = grad_check(net, params)
        assert report.passed and report.max_rel_error < 1e-4

    def test_reports_failure_for_wrong_gradient(self):
        # relu at its kink: backward says 0, central differences say 0.5
        report = grad_check(lambda g, ids: g.sum(g.relu(ids["t"])), {"t": np.array([0.0])})
        assert not report.passed
        assert report.worst == ("t", (0,))

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda g, ids: g.sum(ids["t"]), {"t": np.ones(1)}, h=0.1)
