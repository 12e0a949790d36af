import numpy as np
import pytest

from omnipose import autodiff as ad
from omnipose import tensor as T
from omnipose.oracles import numeric_gradient, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(3)


class TestVar:
    def test_shared_node_accumulates(self, rng):
        x = ad.param(rng.normal(size=(1, 2, 3, 3)))
        y = ad.add(x, x, x)
        y.backward(np.ones(y.shape))
        np.testing.assert_array_equal(x.grad, 3 * np.ones(x.shape))

    def test_constants_get_no_gradient(self, rng):
        c = ad.lift(rng.normal(size=(1, 1, 2, 2)))
        x = ad.param(rng.normal(size=(1, 1, 2, 2)))
        ad.add(c, x).backward(np.ones((1, 1, 2, 2)))
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_deep_chain_is_not_recursive(self):
        x = ad.param(np.ones((1, 1, 1, 1)))
        y = x
        for _ in range(5000):
            y = ad.relu(y)
        y.backward(np.ones((1, 1, 1, 1)))
        assert x.grad[0, 0, 0, 0] == 1.0

    def test_graph_through_conv_and_pool(self, rng):
        x = rng.normal(size=(1, 2, 7, 7))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)

        def build(xv, wv, bv):
            h = ad.relu(ad.conv2d(xv, T.ConvLayer(wv, bv, stride=1, dilation=2, padding=2)))
            return ad.add(h, ad.broadcast_hw(ad.avg_pool_global(h), 7, 7))

        xn, wn, bn = ad.param(x), ad.param(w), ad.param(b)
        out = build(xn, wn, bn)
        cot = rng.normal(size=out.shape)
        out.backward(cot)
        f = lambda: float(np.sum(build(x, w, b).value * cot))
        for node, arr in ((xn, x), (wn, w), (bn, b)):
            assert relative_error(node.grad, numeric_gradient(f, arr)) < 1e-6


class TestAffine:
    def test_forward(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2)
        out = ad.affine(x, np.array([2.0, -1.0]), np.array([0.5, 1.0])).value
        np.testing.assert_array_equal(out[0, 0], 2 * x[0, 0] + 0.5)
        np.testing.assert_array_equal(out[0, 1], 1.0 - x[0, 1])

    def test_gradients(self, rng):
        x, s, t = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3), rng.normal(size=3)
        nodes = [ad.param(a) for a in (x, s, t)]
        out = ad.affine(*nodes)
        cot = rng.normal(size=out.shape)
        out.backward(cot)
        f = lambda: float(np.sum(ad.affine(x, s, t).value * cot))
        for node, arr in zip(nodes, (x, s, t)):
            assert relative_error(node.grad, numeric_gradient(f, arr)) < 1e-7


class TestMse:
    def test_value_against_loop(self, rng):
        p, t = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        total, n = 0.0, 0
        for idx in np.ndindex(p.shape):
            total += (p[idx] - t[idx]) ** 2
            n += 1
        assert ad.mse(p, t).value == pytest.approx(total / n, rel=1e-12)

    def test_masked_mean(self, rng):
        p, t = rng.normal(size=(1, 3, 2, 2)), np.zeros((1, 3, 2, 2))
        mask = np.array([1.0, 0.0, 1.0])[None, :, None, None]
        expect = (p[:, [0, 2]] ** 2).mean()
        assert ad.mse(p, t, mask).value == pytest.approx(expect, rel=1e-12)

    def test_gradient(self, rng):
        p, t = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
        mask = np.array([0.0, 1.0])[None, :, None, None]
        node = ad.param(p)
        ad.mse(node, t, mask).backward()
        num = numeric_gradient(lambda: ad.mse(p, t, mask).value, p)
        assert relative_error(node.grad, num) < 1e-7
        assert not node.grad[:, 0].any()

    def test_all_masked(self, rng):
        node = ad.param(rng.normal(size=(1, 2, 2, 2)))
        loss = ad.mse(node, np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 1, 1)))
        loss.backward()
        assert loss.value == 0.0 and not node.grad.any()
