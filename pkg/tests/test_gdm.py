import math

import numpy as np
import pytest

from omnipose import gdm
from omnipose import tensor as T
from omnipose.gdm import GdmConfig, UpsampleGeometry
from omnipose.oracles import conv2d_loops, numeric_gradient, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _direct_modulate(plane: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Independent loop evaluation: blur with an explicitly built Gaussian, then rescale."""
    c = (size - 1) // 2
    k = np.array([[math.exp(-((u - c) ** 2 + (v - c) ** 2) / (2 * sigma * sigma)) for v in range(size)]
                  for u in range(size)])
    fg = conv2d_loops(plane[None, None], k[None, None], padding=(c, c))[0, 0]
    lo, hi = fg.min(), fg.max()
    return (fg - lo) / (hi - lo) * plane.max()


def _tv(p: np.ndarray) -> float:
    """Anisotropic total variation with zero extension outside the plane."""
    z = np.pad(p, 1)
    return float(np.abs(np.diff(z, axis=0)).sum() + np.abs(np.diff(z, axis=1)).sum())


class TestKernel:
    def test_size_one(self):
        np.testing.assert_array_equal(gdm.gaussian_kernel2d(1, 2.0), [[1.0]])

    def test_flat_limit(self):
        np.testing.assert_allclose(gdm.gaussian_kernel2d(3, 1e6), 1.0, atol=1e-6)

    def test_corner_to_center_ratio(self):
        k = gdm.gaussian_kernel2d(7, 2.0)
        # corner offset (3, 3): exp(-(9 + 9) / (2 * 2^2))
        assert k[3, 3] == 1.0
        assert k[0, 0] / k[3, 3] == pytest.approx(math.exp(-2.25), rel=1e-14)
        assert k[0, 0] == pytest.approx(0.10539922456186433, rel=1e-12)

    def test_rejects_even_size(self):
        with pytest.raises(ValueError):
            gdm.gaussian_kernel2d(4, 1.0)
        with pytest.raises(ValueError):
            GdmConfig(kernel_size=6)
        with pytest.raises(ValueError):
            GdmConfig(sigma_mod=0.0)


class TestModulate:
    def test_delta_keeps_peak(self):
        fd = np.zeros((1, 1, 15, 15))
        fd[0, 0, 7, 7] = 1.0
        out = gdm.modulate(fd)
        assert np.unravel_index(out.argmax(), out.shape) == (0, 0, 7, 7)
        assert out.max() == 1.0

    def test_constant_plane_unchanged(self):
        fd = np.full((1, 2, 6, 6), 0.3)
        np.testing.assert_array_equal(gdm.modulate(fd), fd)

    def test_zero_plane_unchanged(self):
        assert not gdm.modulate(np.zeros((1, 1, 5, 5))).any()

    def test_two_deltas_against_direct_evaluation(self):
        fd = np.zeros((40, 40))
        fd[8, 9], fd[30, 28] = 1.0, 0.5  # farther apart than 2 * kernel_size
        out = gdm.modulate(fd[None, None])[0, 0]
        ref = _direct_modulate(fd, 7, 2.0)
        np.testing.assert_allclose(out, ref, atol=1e-12)
        assert out[30, 28] / out[8, 9] == pytest.approx(ref[30, 28] / ref[8, 9], rel=1e-12)
        assert np.unravel_index(out.argmax(), out.shape) == (8, 9)
        assert out[30, 28] == pytest.approx(0.5, abs=1e-12)

    def test_per_channel_independence(self, rng):
        fd = rng.normal(size=(2, 3, 10, 10))
        out = gdm.modulate(fd)
        for n in range(2):
            for c in range(3):
                np.testing.assert_allclose(out[n, c], gdm.modulate(fd[n : n + 1, c : c + 1])[0, 0], atol=1e-13)

    def test_range_contract(self, rng):
        for _ in range(100):
            fd = rng.normal(size=(1, 1, int(rng.integers(8, 20)), int(rng.integers(8, 20)))) * rng.uniform(0.1, 5)
            out = gdm.modulate(fd)
            assert abs(out.max() - fd.max()) <= 1e-12
            assert abs(out.min()) <= 1e-12

    def test_argmax_of_isolated_peaks(self, rng):
        cfg = GdmConfig()
        k = gdm.gaussian_kernel2d(cfg.kernel_size, cfg.sigma_mod)
        largest_off_center = np.sort(k.ravel())[-2]
        for _ in range(100):
            h, w = rng.integers(16, 32, size=2)
            noise = rng.uniform(0, 1e-3, size=(h, w))
            py, px = rng.integers(0, h), rng.integers(0, w)
            plane = noise.copy()
            plane[py, px] = 1.0
            # the peak survives the blur because the noise mass under the kernel is below the off-center gap
            assert noise.max() * k.sum() < 1 - largest_off_center
            out = gdm.modulate(plane[None, None])[0, 0]
            assert np.unravel_index(out.argmax(), out.shape) == (py, px)

    def test_blur_contracts_total_variation(self, rng):
        cfg = GdmConfig()
        ksum = gdm.gaussian_kernel2d(cfg.kernel_size, cfg.sigma_mod).sum()
        blur = gdm._blur_layer(1, cfg)
        for _ in range(50):
            fd = rng.uniform(0, 1, size=(1, 1, 16, 16)) ** 3
            fg = T.conv2d(fd, blur)
            assert _tv(fg[0, 0]) / ksum <= _tv(fd[0, 0]) + 1e-12

    def test_argmax_idempotent(self, rng):
        for _ in range(30):
            # peaks kept a kernel width from the border so zero padding cannot pull the maximum inward
            x = rng.uniform(0, 1e-3, size=(1, 1, 20, 20))
            x[0, 0, rng.integers(7, 13), rng.integers(7, 13)] = 1.0
            once = gdm.modulate(x)
            twice = gdm.modulate(once)
            assert once.argmax() == twice.argmax()


class TestUpsample:
    def test_zero_weights(self):
        layer = gdm.upsample_layer(np.zeros((2, 3, 4, 4)))
        out = gdm.gdm_upsample(np.ones((1, 2, 4, 4)), GdmConfig(), layer)
        assert out.shape == (1, 3, 8, 8) and not out.any()

    def test_shape_formula(self, rng):
        assert UpsampleGeometry().output_size(4) == 8
        layer = gdm.upsample_layer(rng.normal(size=(1, 1, 4, 4)))
        assert gdm.gdm_upsample(rng.normal(size=(1, 1, 4, 4)), GdmConfig(), layer).shape == (1, 1, 8, 8)

    def test_scattered_peak_argmax(self, rng):
        w = np.zeros((1, 1, 4, 4))
        w[0, 0, 1, 1] = 1.0  # input (i, j) lands on output (2i, 2j)
        for _ in range(20):
            f = rng.uniform(0, 0.02, size=(1, 1, 6, 6))
            i, j = rng.integers(0, 6, size=2)
            f[0, 0, i, j] = 1.0
            out = gdm.gdm_upsample(f, GdmConfig(), gdm.upsample_layer(w))
            assert np.unravel_index(out[0, 0].argmax(), (12, 12)) == (2 * i, 2 * j)

    def test_disabled_is_plain_deconvolution(self, rng):
        layer = gdm.upsample_layer(rng.normal(size=(2, 2, 4, 4)))
        f = rng.normal(size=(1, 2, 3, 3))
        out = gdm.gdm_upsample(f, GdmConfig(enabled=False), layer)
        np.testing.assert_array_equal(out, T.transposed_conv2d(f, layer))

    def test_invalid_geometry(self):
        with pytest.raises(ValueError):
            UpsampleGeometry(stride=2, output_padding=2)


class TestModulateGradient:
    def test_matches_finite_differences(self, rng):
        cfg = GdmConfig(kernel_size=5, sigma_mod=1.5)
        for _ in range(20):
            x = rng.normal(size=(1, 2, 7, 7))
            node = gdm.modulate_node(gdm.ad.param(x), cfg)
            cot = rng.normal(size=x.shape)
            node.backward(cot)
            num = numeric_gradient(lambda: float(np.sum(gdm.modulate(x, cfg) * cot)), x)
            assert relative_error(node.parents[0].grad, num) < 1e-4

    def test_constant_plane_passes_gradient_through(self):
        x = gdm.ad.param(np.full((1, 1, 4, 4), 2.0))
        gdm.modulate_node(x).backward(np.ones((1, 1, 4, 4)))
        np.testing.assert_array_equal(x.grad, np.ones((1, 1, 4, 4)))

    def test_upsample_node_matches_array_path(self, rng):
        layer = gdm.upsample_layer(rng.normal(size=(2, 3, 4, 4)))
        f = rng.normal(size=(1, 2, 5, 5))
        bias = rng.normal(size=3)
        np.testing.assert_array_equal(gdm.gdm_upsample_node(f, GdmConfig(), layer, bias).value,
                                      gdm.gdm_upsample(f, GdmConfig(), layer, bias))
