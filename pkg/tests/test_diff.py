import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layoutlearn import diff as D


def grad_of(fn, *values):
    tape = D.Tape()
    xs = [tape.leaf(v) for v in values]
    out = fn(*xs)
    g = D.backward(tape, out)
    return out.value, [g[x.index] for x in xs]


def central(fn, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def test_square_derivative():
    tape = D.Tape()
    x = tape.leaf(3.0)
    y = tape.record("mul", x, x)
    assert D.backward(tape, y)[x.index] == 6.0


def test_sigmoid_at_zero():
    v, (g,) = grad_of(D.sigmoid, 0.0)
    assert v == 0.5 and g == 0.25


def test_softplus_far_negative():
    with np.errstate(all="raise"):
        v, (g,) = grad_of(D.softplus, -50.0)
    assert 0 <= v < 1e-21 and 0 <= g < 1e-21


def test_softplus_far_positive():
    v, (g,) = grad_of(D.softplus, 800.0)
    assert v == 800.0 and g == 1.0


def test_product_rule():
    _, (ga, gb) = grad_of(lambda a, b: a * b, 2.0, 5.0)
    assert (ga, gb) == (5.0, 2.0)


def test_domain_errors():
    with pytest.raises(D.DomainError):
        D.log(np.array([1.0, -1.0]))
    with pytest.raises(D.DomainError):
        D.sqrt(-1.0)


def test_non_scalar_backward_rejected():
    tape = D.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(D.ContractError):
        D.backward(tape, D.mul(x, 2.0))


def test_unknown_kind_rejected():
    with pytest.raises(D.ContractError):
        D.Tape().record("tanh", 1.0)


def test_unreachable_parameter_gets_zero():
    store = D.ParamStore()
    store.add("a", 2.0)
    store.add("b", [1.0, 2.0])
    tape = D.Tape()
    h = store.attach(tape)
    D.backward(tape, D.mul(h["a"], h["a"]), store)
    assert store.grads["a"] == 4.0
    assert np.array_equal(store.grads["b"], [0.0, 0.0])


def test_frozen_parameter_still_receives_gradient():
    store = D.ParamStore()
    store.add("a", 3.0, frozen=True)
    tape = D.Tape()
    h = store.attach(tape)
    D.backward(tape, D.mul(h["a"], 2.0), store)
    assert store.grads["a"] == 2.0


def test_ties_send_gradient_to_first_argument():
    _, (ga, gb) = grad_of(D.maximum, 1.0, 1.0)
    assert (ga, gb) == (1.0, 0.0)
    _, (ga, gb) = grad_of(D.minimum, 2.0, 2.0)
    assert (ga, gb) == (1.0, 0.0)
    _, (g,) = grad_of(lambda x: D.amax(x), np.array([3.0, 1.0, 3.0]))
    assert np.array_equal(g, [1.0, 0.0, 0.0])


small = arrays(np.float64, (3, 4), elements=st.floats(-2, 2))
positive = arrays(np.float64, (3, 4), elements=st.floats(0.2, 3))

UNARY = {
    "neg": D.neg, "exp": D.exp, "sigmoid": D.sigmoid, "softplus": D.softplus, "sin": D.sin, "cos": D.cos,
    "sum_axis": lambda x: D.sum_(x, axis=1), "mean_axis0": lambda x: D.mean(x, axis=0, keepdims=True),
    "amax_axis": lambda x: D.amax(x, axis=1), "amin": D.amin, "transpose": D.transpose,
    "reshape": lambda x: D.reshape(x, (2, 6)), "getitem": lambda x: D.getitem(x, (slice(1, 3), [0, 2, 2])),
    "broadcast": lambda x: D.broadcast(x, (2, 3, 4)), "square": lambda x: D.power(x, 2.0),
}
POSITIVE_UNARY = {"log": D.log, "sqrt": D.sqrt, "power": lambda x: D.power(x, 1.7)}


def _check_unary(fn, x):
    weights = np.random.default_rng(0).normal(size=np.shape(fn(x)))
    loss = lambda v: float(np.sum(fn(v) * weights))
    _, (g,) = grad_of(lambda v: D.sum_(D.mul(fn(v), weights)), x)
    np.testing.assert_allclose(g, central(loss, x), rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=small)
def test_unary_gradients(name, x):
    if name.startswith("am"):
        # extremes are kinks at ties; keep the ordering but space values 0.1 apart
        x = np.argsort(np.argsort(x.ravel(), kind="stable")).reshape(x.shape) * 0.1 - 0.5
    _check_unary(UNARY[name], x)


@pytest.mark.parametrize("name", sorted(POSITIVE_UNARY))
@given(x=positive)
def test_positive_unary_gradients(name, x):
    _check_unary(POSITIVE_UNARY[name], x)


BINARY = {
    "add": D.add, "sub": D.sub, "mul": D.mul, "div": D.div, "maximum": D.maximum, "minimum": D.minimum,
    "concat": lambda a, b: D.concat([a, b], axis=1),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(a=small, b=positive)
def test_binary_gradients(name, a, b):
    fn = BINARY[name]
    if name in ("maximum", "minimum") and np.min(np.abs(a - b)) < 1e-3:
        return  # kink: one-sided derivatives differ
    w = np.random.default_rng(1).normal(size=np.shape(fn(a, b)))
    _, (ga, gb) = grad_of(lambda x, y: D.sum_(D.mul(fn(x, y), w)), a, b)
    np.testing.assert_allclose(ga, central(lambda v: float(np.sum(fn(v, b) * w)), a), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(gb, central(lambda v: float(np.sum(fn(a, v) * w)), b), rtol=1e-5, atol=1e-7)


@given(a=arrays(np.float64, (3, 4), elements=st.floats(-2, 2)), b=arrays(np.float64, (4, 2), elements=st.floats(-2, 2)))
def test_matmul_gradient(a, b):
    _, (ga, gb) = grad_of(lambda x, y: D.sum_(D.matmul(x, y)), a, b)
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(gb, a.T @ np.ones((3, 2)), atol=1e-12)


def test_broadcasting_operands_unbroadcast():
    _, (ga, gb) = grad_of(lambda a, b: D.sum_(D.mul(a, b)), np.ones((3, 1)), np.arange(4.0))
    assert ga.shape == (3, 1) and np.array_equal(ga[:, 0], [6.0, 6.0, 6.0])
    assert np.array_equal(gb, [3.0, 3.0, 3.0, 3.0])


@given(small, small)
def test_linearity(a, b):
    f = lambda x: D.sum_(D.sin(x))
    g = lambda x: D.sum_(D.mul(x, x))
    _, (gs,) = grad_of(lambda x: D.add(f(x), g(x)), a)
    _, (gf,) = grad_of(f, a)
    _, (gg,) = grad_of(g, a)
    np.testing.assert_array_equal(gs, gf + gg)


def test_replay_is_bit_identical(rng):
    x = rng.normal(size=(5, 5))
    fn = lambda v: D.sum_(D.sigmoid(D.matmul(v, D.transpose(v))))
    _, (g1,) = grad_of(fn, x)
    _, (g2,) = grad_of(fn, x)
    assert g1.tobytes() == g2.tobytes()


def test_untaped_and_taped_forward_agree(rng):
    x = rng.normal(size=(4, 3))
    fn = lambda v: D.softplus(D.matmul(v, D.transpose(v)))
    tape = D.Tape()
    assert np.array_equal(fn(x), fn(tape.leaf(x)).value)


# finite-difference harness

def quadratic_store():
    store = D.ParamStore()
    store.add("a", [1.0, -2.0, 0.5])
    store.add("b", [[0.3, 0.1], [0.2, -0.4]])
    return store


def quadratic_loss(p):
    return D.add(D.sum_(D.mul(p["a"], p["a"])), D.sum_(D.mul(D.matmul(p["b"], p["b"]), 3.0)))


def test_quadratic_fd_check_is_tight():
    report = D.finite_diff_check(quadratic_loss, quadratic_store(), h=1e-4)
    assert report.n_checked == {"a": 3, "b": 4}
    assert report.worst < 1e-9


def test_all_frozen_gives_empty_report():
    store = quadratic_store()
    store.freeze("")
    report = D.finite_diff_check(quadratic_loss, store)
    assert not report and report.worst == 0.0


def test_nondeterministic_loss_is_rejected():
    rng = np.random.default_rng()
    with pytest.raises(D.NonDeterministicLossError):
        D.finite_diff_check(lambda p: D.mul(D.sum_(p["a"]), rng.random()), quadratic_store())


def test_relative_error_floor():
    assert D.relative_error(0.0, 1e-10) == pytest.approx(1e-2)
    assert D.relative_error(2.0, 1.0) == 0.5


def test_fd_check_restores_parameters():
    store = quadratic_store()
    before = store.checksum()
    D.finite_diff_check(quadratic_loss, store)
    assert store.checksum() == before


def test_param_store_contracts():
    store = D.ParamStore()
    store.add("x", np.zeros(2))
    with pytest.raises(D.ContractError):
        store.add("x", np.zeros(2))
    with pytest.raises(D.ContractError):
        store.set("x", np.zeros(3))
    assert store.grads["x"].shape == store["x"].shape
