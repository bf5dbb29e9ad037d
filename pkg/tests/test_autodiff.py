"""Tape gradients against central finite differences, plus backward/Adam/init contracts."""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facetune import autodiff as ad
from facetune.autodiff import Adam, OptimConfig, Parameter, Tensor, check_gradients
from facetune.exceptions import ConfigError, GradientError, ShapeError

N_SHAPES = 20
TOL = 1e-4


def _shape(rng, ndim_lo=1, ndim_hi=3, lo=1, hi=4):
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=rng.integers(ndim_lo, ndim_hi + 1)))


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x)) + 0.0 * x


def _weighted(out, w):
    """Scalar probe sum(out * w) with a fixed random weighting."""
    return ad.sum_(out * Tensor(w))


def _case(op, seed):
    """One randomised (fn, inputs) pair for ``op``; ``fn`` maps tensors to a tensor."""
    rng = np.random.default_rng(seed)
    if op in ("add", "sub", "mul", "div"):
        s = _shape(rng)
        # broadcast the second operand over a random subset of axes
        s2 = tuple(1 if rng.random() < 0.4 else n for n in s)
        if rng.random() < 0.3:
            s2 = s2[1:]
        a = rng.normal(size=s)
        b = _away_from_zero(rng, s2, 0.5) if op == "div" else rng.normal(size=s2)
        fn = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div}[op]
        return fn, [a, b]
    if op == "scalar_mul":
        c = float(rng.normal())
        return (lambda a: ad.scalar_mul(a, c)), [rng.normal(size=_shape(rng))]
    if op == "square":
        return ad.square, [rng.normal(size=_shape(rng))]
    if op == "swapaxes":
        s = _shape(rng, 2, 3)
        i, j = sorted(rng.choice(len(s), 2, replace=False))
        return (lambda a: ad.swapaxes(a, int(i), int(j))), [rng.normal(size=s)]
    if op == "matmul":
        n, k, m = rng.integers(1, 5, size=3)
        lead = _shape(rng, 0, 2)
        if rng.random() < 0.5:
            return ad.matmul, [rng.normal(size=lead + (n, k)), rng.normal(size=(k, m))]
        return ad.matmul, [rng.normal(size=lead + (n, k)), rng.normal(size=lead + (k, m))]
    if op == "sparse_matmul":
        r, c = rng.integers(1, 6, size=2)
        mat = sp.random(r, c, density=0.6, random_state=int(seed), format="csr")
        lead = _shape(rng, 0, 1)
        return (lambda x: ad.sparse_matmul(mat, x)), [rng.normal(size=lead + (c, 2))]
    if op == "gather_rows":
        v = int(rng.integers(2, 6))
        idx = rng.integers(0, v, size=(int(rng.integers(1, 5)), int(rng.integers(1, 4))))
        lead = _shape(rng, 0, 1)
        return (lambda x: ad.gather_rows(x, idx)), [rng.normal(size=lead + (v, 2))]
    if op == "scatter_rows":
        n = int(rng.integers(2, 6))
        idx = rng.integers(0, n, size=int(rng.integers(1, 6)))
        return (lambda g: ad.scatter_rows(g, idx, n)), [rng.normal(size=(len(idx), 3))]
    if op == "reshape":
        s = _shape(rng)
        return (lambda a: ad.reshape(a, (-1,))), [rng.normal(size=s)]
    if op == "flatten":
        s = _shape(rng, 2, 4)
        k = int(rng.integers(0, len(s)))
        return (lambda a: ad.flatten(a, k)), [rng.normal(size=s)]
    if op == "broadcast_to":
        s = _shape(rng, 1, 3)
        target = (int(rng.integers(1, 4)),) + tuple(n if rng.random() < 0.5 else n * 0 + 3
                                                    for n in s)
        src = tuple(n if n == t else 1 for n, t in zip(s, target[1:]))
        return (lambda a: ad.broadcast_to(a, target)), [rng.normal(size=src)]
    if op in ("sum", "mean"):
        s = _shape(rng)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
        keep = bool(rng.random() < 0.5)
        fn = ad.sum_ if op == "sum" else ad.mean
        return (lambda a: fn(a, axis=axis, keepdims=keep)), [rng.normal(size=s)]
    if op == "concat":
        s = _shape(rng, 1, 3)
        axis = int(rng.integers(0, len(s)))
        s2 = list(s)
        s2[axis] = int(rng.integers(1, 4))
        return (lambda a, b: ad.concat([a, b], axis=axis)), [rng.normal(size=s),
                                                             rng.normal(size=tuple(s2))]
    if op == "getitem":
        s = _shape(rng, 1, 3, 2, 5)
        key = tuple(slice(int(rng.integers(0, n - 1)), n) for n in s)
        return (lambda a: ad.getitem(a, key)), [rng.normal(size=s)]
    if op in ("relu", "abs"):
        fn = ad.relu if op == "relu" else ad.abs_
        return fn, [_away_from_zero(rng, _shape(rng))]
    if op == "elu":
        return ad.elu, [_away_from_zero(rng, _shape(rng), 0.05)]
    if op in ("sigmoid", "exp", "softplus"):
        fn = {"sigmoid": ad.sigmoid, "exp": ad.exp, "softplus": ad.softplus}[op]
        return fn, [rng.normal(size=_shape(rng))]
    if op in ("log", "sqrt"):
        fn = ad.log if op == "log" else ad.sqrt
        return fn, [rng.uniform(0.3, 3.0, size=_shape(rng))]
    if op in ("l1_norm", "squared_l2", "l2_norm"):
        s = _shape(rng, 1, 3)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
        fn = {"l1_norm": ad.l1_norm, "squared_l2": ad.squared_l2, "l2_norm": ad.l2_norm}[op]
        return (lambda a: fn(a, axis=axis)), [_away_from_zero(rng, s)]
    raise KeyError(op)


OPS = ["add", "sub", "mul", "div", "scalar_mul", "square", "swapaxes", "matmul",
       "sparse_matmul", "gather_rows", "scatter_rows", "reshape", "flatten", "broadcast_to",
       "sum", "mean", "concat", "getitem", "relu", "abs", "elu", "sigmoid", "exp", "softplus",
       "log", "sqrt", "l1_norm", "squared_l2", "l2_norm"]


def sweep_op(op):
    """Worst tape-vs-differences error of ``op`` over its randomized shapes."""
    worst = 0.0
    for k in range(N_SHAPES):
        fn, inputs = _case(op, 1000 * OPS.index(op) + k)
        with ad.no_grad():
            out_shape = fn(*[Tensor(a) for a in inputs]).shape
        w = np.random.default_rng(k).normal(size=out_shape)
        worst = max(worst, check_gradients(lambda *t: _weighted(fn(*t), w), inputs))
    return worst


@pytest.mark.parametrize("op", OPS)
def test_op_gradients(op):
    worst = sweep_op(op)
    assert worst <= TOL, f"{op}: worst relative error {worst:.2e}"


# forward definitions ---------------------------------------------------------------------

def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_elu_values():
    x = Tensor(np.array([-1.0, 0.0, 2.5]))
    np.testing.assert_allclose(ad.elu(x).data, [np.exp(-1) - 1, 0.0, 2.5])
    assert ad.elu(Tensor(np.array(-1.0))).item() == pytest.approx(-0.6321, abs=1e-4)


def test_elu_is_c1_at_zero():
    h = 1e-7
    f = lambda v: ad.elu(Tensor(np.array(v))).item()  # noqa: E731
    left, right = (f(0.0) - f(-h)) / h, (f(h) - f(0.0)) / h
    assert abs(left - right) <= 1e-6


def test_log_domain_error():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(FloatingPointError):
        ad.log(Tensor(np.array([-1.0])))


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


def test_gather_out_of_range():
    with pytest.raises(ShapeError, match="out of range"):
        ad.gather_rows(Tensor(np.ones((3, 2))), np.array([[0, 3]]))
    with pytest.raises(ShapeError, match="out of range"):
        ad.gather_rows(Tensor(np.ones((3, 2))), np.array([[-1]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)),
              elements=st.floats(-10, 10, allow_nan=False)),
       st.lists(st.integers(0, 5), min_size=1, max_size=12))
def test_gather_scatter_conserves_sum(x, idx):
    idx = np.array([i % x.shape[0] for i in idx])
    t = Tensor(x, requires_grad=True)
    g = np.random.default_rng(len(idx)).normal(size=(len(idx), x.shape[1]))
    ad.backward(ad.sum_(ad.gather_rows(t, idx) * Tensor(g)))
    np.testing.assert_allclose(t.grad.sum(axis=0), g.sum(axis=0), rtol=1e-12, atol=1e-12)


# backward contracts ----------------------------------------------------------------------

def test_backward_sum_is_ones():
    p = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    ad.sum_(p).backward()
    np.testing.assert_array_equal(p.grad, np.ones((3, 4)))


def test_backward_squared_l2():
    p = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    ad.squared_l2(p).backward()
    np.testing.assert_array_equal(p.grad, [6.0, 8.0])


def test_diamond_graph():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    y = ad.sum_(p * p + p * p)
    y.backward()
    np.testing.assert_allclose(p.grad, 4 * p.data)


def test_backward_requires_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError, match="scalar"):
        (p * 2.0).backward()


def test_tape_consumed():
    p = Tensor(np.ones(3), requires_grad=True)
    y = ad.sum_(p * p)
    y.backward()
    with pytest.raises(GradientError, match="consumed"):
        y.backward()
    z = ad.sum_(p * p)
    z.backward(retain_graph=True)
    z.backward()
    np.testing.assert_allclose(p.grad, 2 * (2 * np.ones(3)) + 2 * np.ones(3))


def test_gradients_accumulate():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.sum_(p).backward()
    ad.sum_(p * 3.0).backward()
    np.testing.assert_array_equal(p.grad, [4.0, 4.0])


def test_detached_gets_no_gradient():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    d = p.detach()
    y = ad.sum_(p * d)
    y.backward()
    assert d.grad is None
    np.testing.assert_array_equal(p.grad, d.data)


def test_flag_restored_after_forward_stays_closed():
    w = Parameter(np.ones(3))
    x = Tensor(np.arange(3.0), requires_grad=True)
    w.requires_grad = False
    y = ad.sum_(w * x)
    w.requires_grad = True
    y.backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_no_grad_records_nothing():
    p = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.sum_(p * p)
    assert not y.requires_grad


def test_sibling_order_independent():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    m = Tensor(rng.normal(size=(3, 3)))
    branches = [lambda t: ad.square(t), lambda t: ad.elu(t), lambda t: ad.sigmoid(t) * 3.0,
                lambda t: ad.matmul(t, m)]
    grads = []
    for order in ([0, 1, 2, 3], [3, 1, 0, 2], [2, 3, 1, 0]):
        p = Tensor(x, requires_grad=True)
        total = None
        for i in order:
            y = ad.sum_(branches[i](p))
            total = y if total is None else total + y
        total.backward()
        grads.append(p.grad)
    for g in grads[1:]:
        np.testing.assert_allclose(g, grads[0], rtol=0, atol=1e-12)


def test_grad_returns_without_accumulating():
    p = Tensor(np.array([1.0, 3.0]), requires_grad=True)
    g = ad.grad(ad.sum_(p * p), p)
    np.testing.assert_array_equal(g.data, [2.0, 6.0])
    assert p.grad is None


# second order ------------------------------------------------------------------------------

def _grad_norm_penalty(fn, x, params):
    xt = Tensor(x, requires_grad=True)
    g = ad.grad(fn(xt), xt, create_graph=True)
    return ad.squared_l2(g)


def test_grad_norm_linear_closed_form():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=5))
    x = rng.normal(size=5)
    pen = _grad_norm_penalty(lambda t: ad.sum_(t * w), x, [w])
    assert pen.item() == pytest.approx(float(w.data @ w.data), abs=1e-12)
    pen.backward()
    np.testing.assert_allclose(w.grad, 2 * w.data, atol=1e-10)


def test_grad_norm_sigmoid_matches_fd():
    rng = np.random.default_rng(1)
    w0 = rng.normal(size=4)
    x = rng.normal(size=4)

    def penalty(w_arr):
        w = Tensor(w_arr)
        return _grad_norm_penalty(lambda t: ad.sigmoid(ad.sum_(t * w)), x, [w]).item()

    w = Parameter(w0.copy())
    _grad_norm_penalty(lambda t: ad.sigmoid(ad.sum_(t * w)), x, [w]).backward()
    num = ad.numerical_grad(penalty, [w0.copy()])[0]
    assert ad.relative_error(w.grad, num) <= 1e-3


def test_grad_norm_constant_output():
    w = Parameter(np.ones(3))
    xt = Tensor(np.ones(3), requires_grad=True)
    out = ad.sum_(w * 0.0) + 1.0
    g = ad.grad(out, xt, create_graph=True)
    assert np.all(g.data == 0)


def test_second_order_rejects_unsupported_op():
    xt = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(GradientError, match="l2_norm"):
        ad.grad(ad.l2_norm(xt), xt, create_graph=True)


@pytest.mark.parametrize("op", ["elu", "sigmoid", "matmul", "mean", "gather", "softplus"])
def test_double_backward_ops_match_fd(op):
    """Gradient of sum(d/dx f(x)^2) over parameters matches finite differences."""
    rng = np.random.default_rng(OPS.index("elu") + len(op))
    x = _away_from_zero(rng, (3, 4), 0.1)
    w0 = rng.normal(size=(4, 2))
    idx = np.array([[0, 2], [1, 1], [2, 0]])

    def f(t, w):
        h = ad.matmul(t, w)
        if op == "elu":
            h = ad.elu(h)
        elif op == "sigmoid":
            h = ad.sigmoid(h)
        elif op == "mean":
            h = ad.mean(h * h, axis=0)
        elif op == "gather":
            h = ad.gather_rows(h * h, idx)
        elif op == "softplus":
            h = ad.softplus(h)
        else:
            h = ad.matmul(h, Tensor(np.ones((2, 2)))) * h
        return ad.sum_(h)

    def pen(w_arr):
        return _grad_norm_penalty(lambda t: f(t, Tensor(w_arr)), x, None).item()

    w = Parameter(w0.copy())
    _grad_norm_penalty(lambda t: f(t, w), x, None).backward()
    num = ad.numerical_grad(pen, [w0.copy()])[0]
    assert ad.relative_error(w.grad, num) <= 1e-4


# Adam -------------------------------------------------------------------------------------------

def _reference_adam(p, grads_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grads_fn(p)
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        traj.append(p)
    return np.array(traj)


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adam_matches_reference(wd):
    p = Parameter(np.array([1.0]))
    opt = Adam([p], OptimConfig(learning_rate=0.1, weight_decay=wd))
    traj = []
    for _ in range(3):
        ad.sum_(p * p).backward()
        opt.step()
        traj.append(p.data.copy())
    ref = _reference_adam(1.0, lambda q: 2 * q, 0.1, 3, wd=wd)
    np.testing.assert_allclose(np.ravel(traj), ref, rtol=1e-12)


def test_adam_lr_zero_is_noop():
    p = Parameter(np.array([1.0, -2.0]))
    before = p.data.copy()
    opt = Adam([p], OptimConfig(learning_rate=0.0))
    ad.sum_(p * p).backward()
    opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert p.step_count == 1 and p.grad is None


def test_adam_first_step_magnitude():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=10))
    before = p.data.copy()
    opt = Adam([p], OptimConfig(learning_rate=1e-3, weight_decay=0.0, epsilon=1e-12))
    ad.sum_(p * Tensor(rng.uniform(0.5, 2, 10))).backward()
    opt.step()
    np.testing.assert_allclose(np.abs(p.data - before), 1e-3, rtol=1e-6)


def test_adam_zero_gradient_noop():
    p = Parameter(np.array([0.5, 1.5]))
    opt = Adam([p], OptimConfig(weight_decay=0.0))
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [0.5, 1.5])


def test_adam_missing_gradient_lists_names():
    a, b = Parameter(np.ones(1), name="enc.w"), Parameter(np.ones(1), name="enc.b")
    a.grad = np.ones(1)
    with pytest.raises(GradientError, match="enc.b"):
        Adam([a, b]).step()


def test_adam_coupled_decay_differs():
    def run(decoupled):
        p = Parameter(np.array([2.0]))
        opt = Adam([p], OptimConfig(learning_rate=0.1, weight_decay=0.5, decoupled=decoupled))
        for _ in range(3):
            ad.sum_(p * 1.0).backward()
            opt.step()
        return p.data[0]

    assert run(True) != run(False)


def test_adam_decay_exemption():
    p = Parameter(np.array([2.0]), decay=False)
    opt = Adam([p], OptimConfig(learning_rate=0.1, weight_decay=0.5))
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 2.0


@pytest.mark.parametrize("kw", [dict(beta1=1.0), dict(beta2=0.0), dict(learning_rate=-1.0),
                                dict(weight_decay=-1e-3)])
def test_optim_config_validation(kw):
    with pytest.raises(ConfigError):
        OptimConfig(**kw)


def test_parameter_moments_start_at_zero():
    p = Parameter(np.ones((2, 3)))
    assert np.all(p.adam_m == 0) and np.all(p.adam_v == 0) and p.step_count == 0


# Kaiming -------------------------------------------------------------------------------------------

def test_kaiming_deterministic():
    np.testing.assert_array_equal(ad.kaiming_init((4, 5), 20, seed=3).data,
                                  ad.kaiming_init((4, 5), 20, seed=3).data)
    assert not np.array_equal(ad.kaiming_init((4, 5), 20, seed=3).data,
                              ad.kaiming_init((4, 5), 20, seed=4).data)


def test_kaiming_std():
    x = ad.kaiming_normal((100_000,), 50, seed=0, dtype=np.float64)
    assert abs(x.std() / np.sqrt(2 / 50) - 1) < 0.02


def test_kaiming_std_decreases_with_fan_in():
    stds = [ad.kaiming_normal((20_000,), f, seed=1, dtype=np.float64).std() for f in (10, 100, 1000)]
    assert stds[0] > stds[1] > stds[2]


def test_kaiming_rejects_bad_fan_in():
    with pytest.raises(ValueError):
        ad.kaiming_normal((3,), 0, seed=0)


def test_rng_streams_independent():
    a = ad.rng_for(0, "init").normal(size=4)
    assert np.array_equal(a, ad.rng_for(0, "init").normal(size=4))
    assert not np.array_equal(a, ad.rng_for(0, "batch").normal(size=4))
    assert not np.array_equal(a, ad.rng_for(1, "init").normal(size=4))


def test_precision_default_and_f32_gradients():
    with ad.default_dtype(np.float32):
        assert Parameter(np.ones(2)).dtype == np.float32
        x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        t = Tensor(x, requires_grad=True)
        ad.sum_(ad.elu(t) * t).backward()
        assert t.grad.dtype == np.float32
        ref = np.where(x > 0, 2 * x, np.exp(x) - 1 + x * np.exp(x))
        assert ad.relative_error(t.grad, ref) <= 1e-2
