import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regsynth.imagecore import (
    FeatureStack,
    Image2D,
    bilinear_sample,
    central_diff,
    feature_count,
    gaussian_derivative_features,
    gaussian_kernel,
    harris_response,
    read_image,
    read_pgm,
    read_raster,
    write_image,
    write_pgm,
    write_raster,
)


def ramp(h=12, w=10, a=2.0, b=3.0, c=0.0, d=0.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return a * xx + b * yy + c * xx * yy + d


class TestImage2D:
    def test_validation(self):
        with pytest.raises(ValueError):
            Image2D(np.zeros((1, 5)))
        with pytest.raises(ValueError):
            Image2D(np.zeros((3, 3)), spacing=0)
        with pytest.raises(ValueError):
            Image2D(np.array([[0.0, np.nan], [1.0, 2.0]]))
        with pytest.raises(ValueError):
            Image2D(np.zeros(9))

    def test_dimensions_and_immutability(self):
        img = Image2D(np.zeros((4, 7)), 0.5)
        assert (img.width, img.height, img.shape, img.spacing) == (7, 4, (4, 7), 0.5)
        with pytest.raises(ValueError):
            img.data[0, 0] = 1.0


class TestBilinear:
    def test_integer_coordinate_is_exact(self, rng):
        data = rng.normal(size=(8, 9))
        assert bilinear_sample(Image2D(data), 3, 5) == data[5, 3]

    def test_midpoint(self):
        img = Image2D(np.array([[10.0, 20.0], [0.0, 0.0]]))
        assert bilinear_sample(img, 0.5, 0.0) == pytest.approx(15.0, abs=1e-12)

    @given(st.floats(0, 9), st.floats(0, 11), st.floats(-5, 5), st.floats(-5, 5), st.floats(-1, 1))
    def test_reproduces_bilinear_functions(self, x, y, a, b, c):
        img = Image2D(ramp(a=a, b=b, c=c, d=7.0))
        expected = a * x + b * y + c * x * y + 7.0
        assert bilinear_sample(img, x, y) == pytest.approx(expected, rel=1e-9, abs=1e-9)

    def test_clamps_outside(self):
        img = Image2D(ramp())
        assert bilinear_sample(img, -3.0, 0.0) == bilinear_sample(img, 0.0, 0.0)
        assert bilinear_sample(img, 100.0, 11.0) == bilinear_sample(img, 9.0, 11.0)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_coordinate(self, bad):
        with pytest.raises(ValueError):
            bilinear_sample(Image2D(ramp()), bad, 1.0)


class TestFeatures:
    def test_kernel(self):
        k = gaussian_kernel(1.0)
        assert k.size == 9 and k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(k, k[::-1])

    def test_default_feature_count(self):
        fs = gaussian_derivative_features(Image2D(ramp(32, 32)), (0, 2, 4), 3)
        assert isinstance(fs, FeatureStack)
        assert fs.n_features == 32 == feature_count(3, 3)
        assert fs.flat().shape == (32 * 32, 32)
        assert fs.names[-2:] == ("loc_x", "loc_y")

    @pytest.mark.parametrize("order,scales,expected", [(0, (0,), 3), (1, (0, 2), 8), (2, (1,), 8), (3, (0, 1, 2, 4), 42)])
    def test_feature_count_formula(self, order, scales, expected):
        fs = gaussian_derivative_features(Image2D(np.ones((20, 20))), scales, order)
        assert fs.n_features == expected == feature_count(len(scales), order)

    def test_constant_image(self):
        fs = gaussian_derivative_features(Image2D(np.full((20, 24), 42.0)), (0, 2, 4), 3)
        deriv = [i for i, n in enumerate(fs.names) if n.startswith("s") and not n.endswith("dx0dy0")]
        zero = [i for i, n in enumerate(fs.names) if n.endswith("dx0dy0")]
        assert np.all(fs.values[..., deriv] == 0.0)
        np.testing.assert_allclose(fs.values[..., zero], 42.0, rtol=1e-14)

    def test_location_features_normalized(self):
        fs = gaussian_derivative_features(Image2D(np.zeros((5, 9))), (0,), 1)
        assert fs.values[..., -2].min() == 0 and fs.values[..., -2].max() == 1
        assert fs.values[0, 8, -2] == 1 and fs.values[4, 0, -1] == 1

    @pytest.mark.parametrize("spacing", [1.0, 0.5, 2.0])
    def test_ramp_derivative(self, spacing):
        yy, xx = np.mgrid[0:16, 0:16].astype(float)
        fs = gaussian_derivative_features(Image2D(5 * xx, spacing), (0,), 3)
        names = list(fs.names)
        inner = (slice(3, -3), slice(3, -3))
        np.testing.assert_allclose(fs.values[..., names.index("s0_dx1dy0")][inner], 5 / spacing, rtol=1e-12)
        np.testing.assert_allclose(fs.values[..., names.index("s0_dx0dy1")][inner], 0, atol=1e-12)
        np.testing.assert_allclose(fs.values[..., names.index("s0_dx2dy0")][inner], 0, atol=1e-12)

    def test_translation_commutes(self, rng):
        base = rng.normal(size=(60, 60))
        a = gaussian_derivative_features(Image2D(base[:, :50]), (0, 2, 4), 3).values[..., :-2]
        b = gaussian_derivative_features(Image2D(base[:, 3:53]), (0, 2, 4), 3).values[..., :-2]
        # interior, far enough from the borders for the widest kernel (16 px) plus derivative stencils
        np.testing.assert_allclose(a[20:40, 23:30], b[20:40, 20:27], atol=1e-6)

    def test_invalid(self):
        img = Image2D(np.zeros((10, 10)))
        with pytest.raises(ValueError):
            gaussian_derivative_features(img, (-1,), 1)
        with pytest.raises(ValueError):
            gaussian_derivative_features(img, (0,), 4)
        with pytest.raises(ValueError):
            gaussian_derivative_features(img, (50,), 1)

    def test_central_diff(self):
        d = central_diff(ramp(a=3.0), axis=1, spacing=0.5)
        np.testing.assert_allclose(d[:, 1:-1], 6.0)
        np.testing.assert_allclose(d[:, 0], 3.0)  # clamped one-sided edge


def checkerboard_corner(n=16):
    img = np.zeros((n, n))
    img[: n // 2, : n // 2] = 100
    img[n // 2 :, n // 2 :] = 100
    return img


class TestHarris:
    def test_constant(self):
        assert np.all(harris_response(Image2D(np.full((10, 10), 3.0))).data == 0)

    def test_step_edge_non_positive(self):
        img = np.zeros((20, 20))
        img[:, 10:] = 50
        r = harris_response(Image2D(img)).data
        assert np.all(r[4:-4, 8:12] <= 1e-9)
        assert r[4:-4, 8:12].min() < 0

    def test_corner_is_strict_local_max(self):
        r = harris_response(Image2D(checkerboard_corner())).data
        y, x = np.unravel_index(np.argmax(r), r.shape)
        assert abs(x - 7.5) <= 1 and abs(y - 7.5) <= 1
        patch = r[y - 1 : y + 2, x - 1 : x + 2].ravel()
        assert (patch < r[y, x]).sum() >= 5  # symmetric ties on the corner's 2x2 cell only

    @given(st.floats(-1000, 1000))
    def test_offset_invariance(self, c):
        img = checkerboard_corner() + np.linspace(0, 5, 16)[None, :]
        np.testing.assert_allclose(harris_response(Image2D(img + c)).data, harris_response(Image2D(img)).data,
                                   atol=1e-6)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            harris_response(Image2D(np.zeros((5, 5))), k=0.3)
        with pytest.raises(ValueError):
            harris_response(Image2D(np.zeros((5, 5))), integration_sigma=0)


class TestIO:
    @pytest.mark.parametrize("ext", ["pgm", "png"])
    def test_roundtrip(self, tmp_path, rng, ext):
        img = Image2D(rng.integers(0, 256, (7, 11)).astype(float), 0.75)
        path = tmp_path / f"im.{ext}"
        write_image(path, img)
        back = read_image(path)
        np.testing.assert_array_equal(back.data, img.data)
        assert back.spacing == 0.75

    def test_pgm_header_comment(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# comment\n3 2\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
        np.testing.assert_array_equal(read_pgm(p).data, [[1, 2, 3], [4, 5, 6]])
        assert read_pgm(p).spacing == 1.0

    def test_rejects_ascii_pgm(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P2\n2 2\n255\n1 2 3 4\n")
        with pytest.raises(ValueError):
            read_pgm(p)

    def test_quantized_on_disk(self, tmp_path):
        p = tmp_path / "q.pgm"
        write_pgm(p, Image2D(np.array([[0.4, 254.6], [-3, 300]])))
        np.testing.assert_array_equal(read_pgm(p).data, [[0, 255], [0, 255]])

    def test_raster_roundtrip(self, tmp_path, rng):
        data = rng.normal(size=(5, 6))
        write_raster(tmp_path / "r.raw", data, 2.0)
        back = read_raster(tmp_path / "r.raw")
        np.testing.assert_allclose(back.data, data.astype(np.float32))
        assert back.spacing == 2.0
