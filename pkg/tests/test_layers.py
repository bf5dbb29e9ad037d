import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facetune import autodiff as ad
from facetune.autodiff import Tensor
from facetune.exceptions import ConfigError, ShapeError
from facetune.mesh import build_topology, icosphere
from facetune.nn import (EPS, MLP, BlockConfig, Linear, SpiralBlock, SpiralConv, SpiralResBlock,
                         adain, instance_norm, spiral_conv)


@pytest.fixture(scope="module")
def topo():
    return build_topology(icosphere(1), 1, 4, 5)


def module_gradcheck(fn, x, params, h=1e-5):
    """Relative error of tape vs central differences over ``x`` and ``params``.

    Errors are scaled by the largest gradient entry across all inputs, so
    identically-zero blocks (a bias ahead of a normalisation) are not divided
    by their own rounding noise.
    """
    xt = Tensor(x.copy(), requires_grad=True)
    for p in params:
        p.grad = None
    fn(xt).backward()
    pairs = [(x.copy(), xt.grad, None)] + [(p.data, p.grad, p) for p in params]
    tape, fd = [], []
    for arr, analytic, p in pairs:
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            vals = []
            for d in (h, -h):
                flat[i] = old + d
                with ad.no_grad():
                    vals.append(fn(Tensor(arr if p is None else x)).item())
            flat[i] = old
            num.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
        tape.append(np.ravel(analytic))
        fd.append(num.ravel())
    return ad.relative_error(np.concatenate(tape), np.concatenate(fd))


def _probe(out, seed):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_(out * Tensor(w))


# spiral conv ------------------------------------------------------------------------------------

def test_spiral_conv_zero_weight_gives_bias():
    sp = np.array([[0, 1], [1, 2], [2, 0]])
    b = np.array([0.5, -1.0])
    out = spiral_conv(Tensor(np.random.default_rng(0).normal(size=(3, 4))),
                      Tensor(np.zeros((8, 2))), Tensor(b), sp)
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))


def test_spiral_conv_length_one_is_linear():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    out = spiral_conv(Tensor(x), Tensor(w), Tensor(b), np.arange(5)[:, None])
    np.testing.assert_allclose(out.data, x @ w + b, atol=1e-12)


def test_spiral_conv_matches_loop_oracle():
    m = icosphere(1)
    from facetune.mesh import compute_spirals
    rng = np.random.default_rng(2)
    v = 12
    sub = compute_spirals(icosphere(0).faces, v, 4)
    x = rng.normal(size=(v, 2))
    w, b = rng.normal(size=(8, 2)), rng.normal(size=2)
    want = np.zeros((v, 2))
    for i in range(v):
        for o in range(2):
            acc = b[o]
            for k, j in enumerate(sub[i]):
                for c in range(2):
                    acc += x[j, c] * w[k * 2 + c, o]
            want[i, o] = acc
    got = spiral_conv(Tensor(x), Tensor(w), Tensor(b), sub).data
    np.testing.assert_allclose(got, want, atol=1e-6)
    assert m.n_vertices == 42


def test_spiral_conv_shape_errors():
    sp = np.zeros((3, 2), int)
    with pytest.raises(ShapeError):
        spiral_conv(Tensor(np.ones((4, 2))), Tensor(np.ones((4, 1))), Tensor(np.ones(1)), sp)
    with pytest.raises(ShapeError):
        spiral_conv(Tensor(np.ones((3, 2))), Tensor(np.ones((5, 1))), Tensor(np.ones(1)), sp)


def test_spiral_conv_commutes_with_relabelling():
    from facetune.mesh import compute_spirals
    m = icosphere(1)
    rng = np.random.default_rng(3)
    sp = compute_spirals(m.faces, 42, 7)
    perm = rng.permutation(42)
    inv = np.argsort(perm)
    x = rng.normal(size=(42, 3))
    w, b = rng.normal(size=(21, 2)), rng.normal(size=2)
    out = spiral_conv(Tensor(x), Tensor(w), Tensor(b), sp).data
    # vertex i moves to position perm[i]; table rows and entries are relabelled alike
    sp2 = np.empty_like(sp)
    sp2[perm] = perm[sp]
    x2 = np.empty_like(x)
    x2[perm] = x
    out2 = spiral_conv(Tensor(x2), Tensor(w), Tensor(b), sp2).data
    np.testing.assert_allclose(out2[perm], out, atol=1e-12)
    assert inv.shape == (42,)


def sweep_spiral_conv(topo):
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(k)
        cin, cout = rng.integers(1, 4, size=2)
        lead = tuple(rng.integers(1, 3, size=rng.integers(0, 2)))
        layer = SpiralConv(int(cin), int(cout), topo.spirals[1], rng)
        layer.bias.data = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=lead + (11, int(cin)))
        worst = max(worst, module_gradcheck(lambda t: _probe(layer(t), k), x, layer.parameters()))
    return worst


def test_spiral_conv_gradients(topo):
    assert sweep_spiral_conv(topo) <= 1e-4


# instance norm / AdaIN ------------------------------------------------------------------------

def test_instance_norm_constant_channel():
    x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    out = instance_norm(Tensor(x)).data
    np.testing.assert_array_equal(out[:, 0], 0.0)


def test_instance_norm_known_values():
    out = instance_norm(Tensor(np.array([[1.0], [2.0], [3.0]]))).data.ravel()
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_instance_norm_moments():
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(2, 50, 4))
    out = instance_norm(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-2), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-2), 1.0, atol=1e-4)


def test_instance_norm_needs_two_vertices():
    with pytest.raises(ShapeError):
        instance_norm(Tensor(np.ones((1, 3))))


def test_adain_identity_case():
    x = instance_norm(Tensor(np.random.default_rng(1).normal(size=(30, 3)))).data
    out = adain(Tensor(x), Tensor(np.zeros(3)), Tensor(np.ones(3))).data
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_adain_known_values():
    out = adain(Tensor(np.array([[1.0], [2.0], [3.0]])), Tensor([5.0]), Tensor([2.0]))
    np.testing.assert_allclose(out.data.ravel(), [2.551, 5.0, 7.449], atol=2e-3)


def test_adain_postcondition_random():
    for k in range(20):
        rng = np.random.default_rng(k)
        b, v, c = rng.integers(1, 4), rng.integers(5, 40), rng.integers(1, 6)
        x = rng.normal(rng.normal(), rng.uniform(0.5, 4), size=(b, v, c))
        mu, sd = rng.normal(size=(b, c)), rng.uniform(0.2, 3, size=(b, c))
        out = adain(Tensor(x), Tensor(mu), Tensor(sd)).data
        np.testing.assert_allclose(out.mean(axis=1), mu, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=1), sd, atol=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 50), st.integers(1, 6),
       st.floats(-50, 50), st.floats(0.05, 20))
def test_adain_statistics_property(seed, v, c, loc, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(loc, scale, size=(v, c))
    mu, sd = rng.normal(size=c) * 10, rng.uniform(0.1, 5, size=c)
    out = adain(Tensor(x), Tensor(mu), Tensor(sd)).data
    np.testing.assert_allclose(out.mean(axis=0), mu, atol=1e-5)
    # the variance epsilon shrinks the scale slightly for near-flat channels
    var = x.var(axis=0)
    np.testing.assert_allclose(out.std(axis=0), sd * np.sqrt(var / (var + EPS)), rtol=1e-9)


def test_adain_own_statistics_is_identity():
    for k in range(20):
        x = np.random.default_rng(k).normal(2.0, 3.0, size=(40, 4))
        out = adain(Tensor(x), Tensor(x.mean(0)), Tensor(x.std(0))).data
        np.testing.assert_allclose(out, x, atol=1e-4)


def test_adain_channel_check():
    with pytest.raises(ShapeError):
        adain(Tensor(np.ones((4, 3))), Tensor(np.zeros(2)), Tensor(np.ones(3)))


def sweep_norm():
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(100 + k)
        b, v, c = rng.integers(1, 3), rng.integers(2, 7), rng.integers(1, 4)
        x = rng.normal(size=(b, v, c))
        worst = max(worst, ad.check_gradients(lambda t: _probe(instance_norm(t), k), [x]))
        mu, sd = rng.normal(size=(b, c)), rng.uniform(0.5, 2, size=(b, c))
        worst = max(worst, ad.check_gradients(
            lambda t, m, s: _probe(adain(t, m, s), k), [x, mu, sd]))
    return worst


def test_norm_gradients():
    assert sweep_norm() <= 1e-4


# blocks --------------------------------------------------------------------------------------------

def _zero(module):
    for p in module.parameters():
        p.data[...] = 0.0


def test_block_zero_weights_constant_bias(topo):
    blk = SpiralBlock(BlockConfig(3, 4, 0), topo, np.random.default_rng(0))
    _zero(blk)
    blk.conv.bias.data[:] = [-1.0, 0.0, 0.5, 2.0]
    out = blk(Tensor(np.random.default_rng(1).normal(size=(42, 3)))).data
    np.testing.assert_allclose(out, np.tile(ad.elu(Tensor(blk.conv.bias.data)).data, (42, 1)))


def test_block_down_shape(topo):
    blk = SpiralBlock(BlockConfig(3, 4, 0, resample="down"), topo, np.random.default_rng(0))
    assert blk(Tensor(np.ones((2, 42, 3)))).shape == (2, 11, 4)
    up = SpiralBlock(BlockConfig(4, 2, 0, resample="up"), topo, np.random.default_rng(0))
    assert up(Tensor(np.ones((2, 11, 4)))).shape == (2, 42, 2)


@pytest.mark.parametrize("norm", ["none", "instance", "adain"])
def test_block_matches_composition(topo, norm):
    rng = np.random.default_rng(2)
    blk = SpiralBlock(BlockConfig(3, 4, 0, norm=norm, resample="down"), topo, rng)
    x = Tensor(rng.normal(size=(42, 3)))
    style = None
    if norm == "adain":
        style = [(Tensor(rng.normal(size=4)), Tensor(rng.uniform(0.5, 2, 4)))]
    h = spiral_conv(x, blk.conv.weight, blk.conv.bias, topo.spirals[0])
    if norm == "instance":
        h = instance_norm(h)
    elif norm == "adain":
        h = adain(h, *style[0])
    h = ad.elu(h)
    want = topo.down[0] @ h.data
    np.testing.assert_allclose(blk(x, style).data, want, atol=1e-12)


def test_block_config_validation(topo):
    with pytest.raises(ConfigError):
        BlockConfig(1, 1, 0, norm="batch")
    with pytest.raises(ConfigError):
        SpiralBlock(BlockConfig(1, 1, 1, resample="down"), topo, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        SpiralBlock(BlockConfig(1, 1, 0, norm="adain"), topo, np.random.default_rng(0))(
            Tensor(np.ones((42, 1))))


def test_res_block_zero_main_is_identity(topo):
    blk = SpiralResBlock(BlockConfig(3, 3, 0), topo, np.random.default_rng(0))
    _zero(blk)
    x = np.random.default_rng(1).normal(size=(42, 3))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_res_block_projection(topo):
    blk = SpiralResBlock(BlockConfig(4, 8, 1), topo, np.random.default_rng(0))
    assert blk.project is not None
    assert blk(Tensor(np.ones((11, 4)))).shape == (11, 8)
    with pytest.raises(ConfigError):
        SpiralResBlock(BlockConfig(4, 8, 0, resample="down"), topo, np.random.default_rng(0))


def _block_cases(topo, k):
    rng = np.random.default_rng(200 + k)
    kind = ["block", "block_down", "block_up", "res", "res_proj"][k % 5]
    norm = ["none", "instance", "adain"][k % 3]
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    if kind == "block":
        m = SpiralBlock(BlockConfig(cin, cout, 1, norm=norm), topo, rng)
        shape = (11, cin)
        n_style = 1
    elif kind == "block_down":
        m = SpiralBlock(BlockConfig(cin, cout, 0, norm=norm, resample="down"), topo, rng)
        shape = (42, cin)
        n_style = 1
    elif kind == "block_up":
        m = SpiralBlock(BlockConfig(cin, cout, 0, norm=norm, resample="up"), topo, rng)
        shape = (11, cin)
        n_style = 1
    else:
        cout = cin if kind == "res" else cin + 1
        m = SpiralResBlock(BlockConfig(cin, cout, 1, norm=norm), topo, rng)
        shape = (11, cin)
        n_style = 2
    for p in m.parameters():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    style = None
    if norm == "adain":
        style = [(Tensor(rng.normal(size=cout)), Tensor(rng.uniform(0.5, 2, cout)))
                 for _ in range(n_style)]
    return m, rng.normal(size=shape), style


def sweep_block(topo):
    worst = 0.0
    for k in range(20):
        m, x, style = _block_cases(topo, k)
        worst = max(worst, module_gradcheck(lambda t: _probe(m(t, style), k), x, m.parameters()))
    return worst


def test_block_gradients(topo):
    assert sweep_block(topo) <= 1e-4


def test_res_block_gradient_sums_paths(topo):
    rng = np.random.default_rng(7)
    blk = SpiralResBlock(BlockConfig(2, 3, 1), topo, rng)
    x = rng.normal(size=(11, 2))

    def main(t):
        h = ad.elu(blk.conv1(t))
        return ad.elu(blk.conv2(h))

    xt = Tensor(x, requires_grad=True)
    g_full = ad.grad(_probe(blk(xt), 0), xt).data
    xt = Tensor(x, requires_grad=True)
    g_main = ad.grad(_probe(main(xt), 0), xt).data
    xt = Tensor(x, requires_grad=True)
    g_skip = ad.grad(_probe(blk.project(xt), 0), xt).data
    np.testing.assert_allclose(g_full, g_main + g_skip, atol=1e-12)
    num = ad.numerical_grad(lambda a: _probe(blk(Tensor(a)), 0).item(), [x.copy()])[0]
    assert ad.relative_error(g_full, num) <= 1e-4


# MLP -------------------------------------------------------------------------------------------------

def test_mlp_identity_layer():
    mlp = MLP([3, 3], np.random.default_rng(0))
    mlp.layers[0].weight.data = np.eye(3)
    x = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(mlp(Tensor(x)).data, x)


def test_mlp_negative_preactivations_zero():
    mlp = MLP([2, 3, 2], np.random.default_rng(0), final_activation="relu")
    for layer in mlp.layers:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = -1.0
    assert np.all(mlp(Tensor(np.ones((2, 2)))).data == 0.0)
    mlp.final_activation = None
    np.testing.assert_array_equal(mlp(Tensor(np.ones((2, 2)))).data, -1.0)


def test_mlp_hand_computation():
    mlp = MLP([2, 3, 1], np.random.default_rng(0))
    w1 = np.array([[1.0, -1.0, 0.5], [2.0, 0.0, -1.0]])
    b1 = np.array([0.0, 0.5, 0.1])
    w2 = np.array([[1.0], [2.0], [-3.0]])
    b2 = np.array([0.25])
    mlp.layers[0].weight.data, mlp.layers[0].bias.data = w1, b1
    mlp.layers[1].weight.data, mlp.layers[1].bias.data = w2, b2
    x = np.array([[1.0, 2.0]])
    # hidden = relu([5, -0.5, -1.4]) = [5, 0, 0]
    assert mlp(Tensor(x)).data[0, 0] == pytest.approx(5.25)


def test_mlp_size_mismatch():
    with pytest.raises(ShapeError):
        MLP([3, 2], np.random.default_rng(0))(Tensor(np.ones(4)))
    with pytest.raises(ConfigError):
        MLP([3], np.random.default_rng(0))


def sweep_mlp():
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(300 + k)
        sizes = [int(n) for n in rng.integers(1, 5, size=rng.integers(2, 5))]
        mlp = MLP(sizes, rng)
        for p in mlp.parameters():
            p.data = p.data + 0.3
        x = rng.normal(size=(int(rng.integers(1, 4)), sizes[0]))
        worst = max(worst, module_gradcheck(lambda t: _probe(mlp(t), k), x, mlp.parameters()))
    return worst


def test_mlp_gradients():
    assert sweep_mlp() <= 1e-4


def test_linear_shapes():
    lin = Linear(3, 5, np.random.default_rng(0))
    assert lin(Tensor(np.ones((2, 7, 3)))).shape == (2, 7, 5)
