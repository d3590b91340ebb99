import math
import zlib

import numpy as np
import pytest

import diffcopula.ndiff as nd


def test_square_value_and_gradient():
    x = nd.Tensor(3.0, requires_grad=True)
    with nd.Tape() as tape:
        y = x * x
    assert y.item() == 9.0
    assert tape.backward(y)[x] == pytest.approx(6.0)


def test_softmax_symmetry_and_zero_gradient_of_sum():
    v = nd.Tensor(np.zeros(3), requires_grad=True)
    with nd.Tape() as tape:
        s = nd.softmax(v)
        total = nd.sum_(s)
    np.testing.assert_allclose(s.data, np.full(3, 1 / 3))
    np.testing.assert_allclose(tape.backward(total)[v], 0.0, atol=1e-15)


def test_mlp_matches_straight_line_arithmetic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    w1, b1, w2, b2 = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=2)
    out = nd.tanh(nd.Tensor(x) @ nd.Tensor(w1) + nd.Tensor(b1)) @ nd.Tensor(w2) + nd.Tensor(b2)
    expected = np.empty((5, 2))
    for i in range(5):
        h = [math.tanh(sum(x[i, k] * w1[k, j] for k in range(3)) + b1[j]) for j in range(4)]
        for j in range(2):
            expected[i, j] = sum(h[k] * w2[k, j] for k in range(4)) + b2[j]
    np.testing.assert_allclose(out.data, expected, rtol=1e-13)


def test_three_layer_net_gradient_check():
    rng = np.random.default_rng(1)
    x = nd.Tensor(rng.normal(size=(6, 3)))

    def fn(p):
        h = nd.tanh(x @ p[0])
        h = nd.sigmoid(h @ p[1])
        return nd.mean(nd.square(h @ p[2]))

    point = [rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=(4, 1))]
    assert nd.grad_check(fn, point) < 1e-5


def test_grad_check_sum_of_squares():
    assert nd.grad_check(lambda p: nd.sum_(nd.square(p[0])), np.array([0.5, -1.5, 2.0])) < 1e-8


UNARY = {
    "tanh": (nd.tanh, lambda r, n: r.normal(size=n)),
    "sigmoid": (nd.sigmoid, lambda r, n: r.normal(size=n)),
    "exp": (nd.exp, lambda r, n: r.normal(size=n)),
    "log": (nd.log, lambda r, n: r.uniform(0.2, 3.0, size=n)),
    "softplus": (nd.softplus, lambda r, n: r.normal(size=n) * 3),
    "square": (nd.square, lambda r, n: r.normal(size=n)),
    "abs_smooth": (nd.abs_smooth, lambda r, n: r.choice([-1, 1], size=n) * r.uniform(0.1, 2, size=n)),
    "softmax": (lambda a: nd.softmax(a, temperature=0.5), lambda r, n: r.normal(size=n)),
    "log_softmax": (lambda a: nd.log_softmax(a, temperature=0.5), lambda r, n: r.normal(size=n)),
    "logsumexp": (lambda a: nd.logsumexp(a), lambda r, n: r.normal(size=n)),
    "lgamma": (nd.lgamma, lambda r, n: r.uniform(0.6, 20.0, size=n)),
    "scale": (lambda a: nd.scale(a, -2.5), lambda r, n: r.normal(size=n)),
    "mean": (nd.mean, lambda r, n: r.normal(size=n)),
    "slice": (lambda a: a[1:3], lambda r, n: r.normal(size=n)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients_at_100_points(name):
    op, draw = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    weights = rng.normal(size=4)
    worst = 0.0
    for _ in range(100):
        out_w = weights[: op(nd.Tensor(np.ones(4))).size]
        fn = lambda p: nd.sum_(op(p[0]) * out_w) if out_w.size > 1 else nd.sum_(op(p[0]))
        worst = max(worst, nd.grad_check(fn, draw(rng, 4)))
    assert worst < 1e-5


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "matmul"])
def test_binary_gradients_at_100_points(name):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        if name == "matmul":
            point = [rng.normal(size=(2, 3)), rng.normal(size=(3, 2))]
            fn = lambda p: nd.sum_(nd.square(p[0] @ p[1]))
        else:
            op = getattr(nd, name)
            b = rng.normal(size=3) if name != "div" else rng.uniform(0.5, 2.0, size=3)
            point = [rng.normal(size=(2, 3)), b]  # broadcasting second operand
            fn = lambda p: nd.sum_(nd.square(op(p[0], p[1])))
        worst = max(worst, nd.grad_check(fn, point))
    assert worst < 1e-5


def test_concat_and_reshape_gradients():
    rng = np.random.default_rng(3)
    fn = lambda p: nd.sum_(nd.square(nd.reshape(nd.concat([p[0], p[1]], axis=1), (10,))) * np.arange(10.0))
    assert nd.grad_check(fn, [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))]) < 1e-5


def test_lgamma_matches_math():
    for x in (0.5, 1.0, 2.5, 7.3, 50.0, 150.0):
        assert nd.lgamma_value(x) == pytest.approx(math.lgamma(x), rel=1e-13, abs=1e-13)


def test_constant_subgraph_has_zero_gradient():
    x = nd.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    c = nd.Tensor(np.array([3.0, 4.0]))
    with nd.Tape() as tape:
        y = nd.sum_(x * 2.0) + nd.sum_(nd.exp(c))
    assert len(tape) > 0
    grads = tape.backward(y)
    assert c not in grads
    np.testing.assert_array_equal(grads[c], 0.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 4))
    x = rng.normal(size=(3, 4))
    a = nd.softplus(nd.Tensor(x) @ nd.Tensor(w)).data
    b = nd.softplus(nd.Tensor(x) @ nd.Tensor(w)).data
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch_reports_node():
    with nd.Tape():
        with pytest.raises(nd.ShapeError, match="node"):
            nd.Tensor(np.ones((2, 3)), requires_grad=True) @ nd.Tensor(np.ones((2, 3)))


def test_non_finite_forward_rejected():
    with nd.Tape():
        with pytest.raises(nd.NonFiniteError):
            nd.log(nd.Tensor(np.array([-1.0]), requires_grad=True))


def test_backward_before_forward_rejected():
    with pytest.raises(RuntimeError):
        nd.Tape().backward(nd.Tensor(1.0, requires_grad=True))


def test_adam_zero_gradient_no_decay_leaves_params():
    p = nd.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = nd.OptState(lr=0.1)
    nd.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    p = nd.Tensor(np.array(0.0), requires_grad=True)
    nd.adam_step([p], [np.array(1.0)], nd.OptState(lr=0.1))
    assert p.data == pytest.approx(-0.1, rel=1e-6)


def test_adam_decoupled_weight_decay():
    p = nd.Tensor(np.array(2.0), requires_grad=True)
    nd.adam_step([p], [np.array(0.0)], nd.OptState(lr=0.1, weight_decay=1e-5))
    assert p.data == pytest.approx(2.0 * (1 - 0.1 * 1e-5), rel=1e-14)


def test_adam_skips_non_finite():
    p = nd.Tensor(np.array(1.0), requires_grad=True)
    state = nd.OptState()
    assert not nd.adam_step([p], [np.array(np.nan)], state)
    assert p.data == 1.0 and state.skipped == 1 and state.step == 0


def test_one_cycle_schedule_shape():
    lrs = [nd.one_cycle_lr(s, 100, 1.0) for s in range(100)]
    assert lrs[0] == pytest.approx(1 / 25)
    assert max(lrs) == pytest.approx(1.0)
    assert lrs[-1] == pytest.approx(1e-4)
