import numpy as np
import pytest

from regsynth.deformation import DeformationField, min_jacobian_determinant
from regsynth.finalreg import mutual_information
from regsynth.imagecore import Image2D
from regsynth.synthgen import (
    BACKGROUND,
    CSF,
    GM,
    WM,
    SynthConfig,
    boundary_window,
    generate_dataset,
    generate_pair,
    generate_phantom_pair,
    invert_field,
    place_landmarks,
    project_landmarks,
    quantize_8bit,
    read_landmarks_csv,
    read_pair,
    sample_deformation,
    sample_deformation_parts,
    write_landmarks_csv,
)
from regsynth.vem import LandmarkSet


class TestPhantom:
    def test_deterministic(self):
        a1, b1 = generate_phantom_pair(64, 3)
        a2, b2 = generate_phantom_pair(64, 3)
        np.testing.assert_array_equal(a1.data, a2.data)
        np.testing.assert_array_equal(b1.data, b2.data)
        assert not np.array_equal(a1.data, generate_phantom_pair(64, 4)[0].data)

    def test_class_order_differs(self):
        a, b, labels = generate_phantom_pair(64, 0, return_labels=True)
        classes = [BACKGROUND, CSF, GM, WM]
        assert all((labels == c).any() for c in classes)
        ma = [a.data[labels == c].mean() for c in classes]
        mb = [b.data[labels == c].mean() for c in classes]
        assert list(np.argsort(ma)) != list(np.argsort(mb))

    def test_alignment_maximizes_mi(self):
        for seed in range(3):
            a, b = generate_phantom_pair(64, seed)
            shift = DeformationField(np.stack([np.full((64, 64), 5.0), np.zeros((64, 64))]))
            assert mutual_information(a, b) > mutual_information(a, b, field=shift)

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            generate_phantom_pair(32, 0)


class TestDeformation:
    def test_identity_when_quiet(self):
        cfg = SynthConfig(sigma_v=0.0, rotation_deg=0.0, translation_px=0.0, log_scale=0.0)
        np.testing.assert_array_equal(sample_deformation(64, cfg, 0).data, 0.0)

    def test_window(self):
        w = boundary_window((20, 30), 1.0)
        assert np.all(w[0] == 0) and np.all(w[:, -1] == 0)
        assert w[10, 15] == pytest.approx(1 - np.exp(-0.01 * 81))
        assert np.all((w >= 0) & (w < 1))

    @pytest.mark.parametrize("seed", range(3))
    def test_border_is_fixed(self, seed):
        nonlin = sample_deformation_parts(64, SynthConfig(sigma_v=30.0), seed).nonlinear.in_pixels()
        border = np.concatenate([nonlin[:, 0].ravel(), nonlin[:, -1].ravel(), nonlin[:, :, 0].ravel(),
                                 nonlin[:, :, -1].ravel()])
        assert np.abs(border).max() < 0.05

    def test_nonlinear_part_is_diffeomorphic(self):
        cfg = SynthConfig(sigma_v=30.0)
        for seed in range(100):
            assert min_jacobian_determinant(sample_deformation_parts(64, cfg, seed).nonlinear) > 0

    def test_severity_grows_with_sigma_v(self):
        mags = []
        for sv in (10.0, 20.0, 30.0):
            cfg = SynthConfig(sigma_v=sv)
            mags.append(np.mean([np.hypot(*sample_deformation_parts(64, cfg, s).nonlinear.data).mean()
                                 for s in range(10)]))
        assert mags[0] < mags[1] < mags[2]

    def test_similarity_metadata(self):
        parts = sample_deformation_parts(64, SynthConfig(), 1)
        assert parts.similarity["order"] == "nonlinear_after_similarity"
        assert parts.similarity["scale"] > 0

    def test_pure_translation(self):
        cfg = SynthConfig(sigma_v=0.0, rotation_deg=0.0, log_scale=0.0, translation_px=1.0)
        f = sample_deformation_parts(64, cfg, 2)
        np.testing.assert_allclose(f.field.data[0], f.similarity["tx_px"], atol=1e-12)

    def test_invert_field(self):
        f = sample_deformation(64, SynthConfig(sigma_v=10.0, rotation_deg=0, translation_px=0, log_scale=0), 0)
        inv = invert_field(f).in_pixels()
        u = f.in_pixels()
        yy, xx = np.mgrid[0:64, 0:64].astype(float)
        from regsynth.imagecore import bilinear_sample

        back = inv + np.stack([bilinear_sample(u[c], xx + inv[0], yy + inv[1]) for c in range(2)])
        assert np.abs(back[:, 5:-5, 5:-5]).max() < 0.05


class TestLandmarks:
    def test_single_is_harris_max(self):
        from regsynth.imagecore import harris_response

        a, _ = generate_phantom_pair(64, 0)
        pt = place_landmarks(a, 1)[0]
        r = harris_response(a).data
        assert r[pt[1], pt[0]] == r.max()

    def test_no_repeats_and_spread(self):
        for seed in range(5):
            a, _ = generate_phantom_pair(64, seed)
            pts = place_landmarks(a, 8, seed=seed)
            assert len({tuple(p) for p in pts}) == 8
            d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
            assert d[np.triu_indices(8, 1)].min() > 6.4 / 2

    def test_zero_and_too_many(self):
        img = Image2D(np.random.default_rng(0).normal(size=(5, 5)))
        assert place_landmarks(img, 0).shape == (0, 2)
        with pytest.raises(ValueError):
            place_landmarks(img, 26)

    def test_projection_identity(self):
        pts = np.array([[3, 4], [10, 2]])
        lm = project_landmarks(pts, DeformationField.zeros((16, 16)), 0.0)
        np.testing.assert_array_equal(lm.kh, pts)

    def test_projection_constant(self):
        pts = np.array([[3, 4], [10, 2]])
        f = DeformationField(np.full((2, 16, 16), 2.0))
        np.testing.assert_array_equal(project_landmarks(pts, f, 0.0).kh, pts + 2)

    def test_projection_drops_outside(self):
        f = DeformationField(np.full((2, 16, 16), 3.0))
        lm = project_landmarks(np.array([[3, 4], [14, 2]]), f, 0.0)
        assert len(lm) == 1 and lm.k[0].tolist() == [3, 4]

    def test_noise_std(self):
        pts = np.tile([[32, 32]], (10_000, 1))
        lm = project_landmarks(pts, DeformationField.zeros((64, 64), 1.0), 0.5, seed=1)
        std = (lm.kh - 32).std(axis=0)
        assert np.all(np.abs(std - 0.5) < 0.025)

    def test_csv_roundtrip(self, tmp_path):
        lm = LandmarkSet([[1, 2], [3, 4]], [[1.25, 2.5], [3.125, 4.0]], 0.5)
        write_landmarks_csv(tmp_path / "l.csv", lm)
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "id,kx_px,ky_px,khx_px,khy_px"
        back = read_landmarks_csv(tmp_path / "l.csv")
        np.testing.assert_array_equal(back.k, lm.k)
        np.testing.assert_array_equal(back.kh, lm.kh)


class TestQuantize:
    def test_identity_range(self):
        data = np.arange(256, dtype=float).reshape(16, 16)
        np.testing.assert_array_equal(quantize_8bit(Image2D(data)).data, data)

    def test_two_values(self):
        out = quantize_8bit(Image2D(np.array([[3.0, 7.0], [7.0, 3.0]]))).data
        np.testing.assert_array_equal(out, [[0, 255], [255, 0]])

    def test_error_bound(self, rng):
        data = rng.normal(0, 10, (30, 30))
        out = quantize_8bit(Image2D(data)).data
        rescaled = (data - data.min()) / (data.max() - data.min()) * 255
        assert np.abs(out - rescaled).max() <= 0.5

    def test_half_to_even(self):
        data = np.array([[0.0, 0.5, 1.5, 2.5, 255.0]] * 2)
        np.testing.assert_array_equal(quantize_8bit(Image2D(data)).data, [[0, 0, 2, 2, 255]] * 2)

    def test_constant(self):
        assert np.all(quantize_8bit(Image2D(np.full((3, 3), 9.0))).data == 0)


class TestPairs:
    def test_pair_contents(self):
        p = generate_pair(SynthConfig(), 0)
        assert p.reference.shape == p.floating.shape == p.truth.shape == p.mask.shape
        assert set(np.unique(p.reference.data)) <= set(range(256))
        assert p.meta["min_jacobian_nonlinear"] > 0
        assert 0 < len(p.landmarks) <= 8 and 0.2 < p.mask.mean() < 1

    def test_deterministic(self):
        a, b = generate_pair(SynthConfig(), 2), generate_pair(SynthConfig(), 2)
        np.testing.assert_array_equal(a.floating.data, b.floating.data)
        np.testing.assert_array_equal(a.truth.data, b.truth.data)
        np.testing.assert_array_equal(a.landmarks.kh, b.landmarks.kh)

    def test_truth_explains_floating(self):
        # warping the unquantized modality-B image by the truth reproduces the floating image
        from regsynth.deformation import warp_image

        cfg = SynthConfig()
        p = generate_pair(cfg, 1)
        _, b = generate_phantom_pair(cfg.size, p.meta["seed"], cfg.spacing)
        again = quantize_8bit(warp_image(b, p.truth))
        np.testing.assert_array_equal(again.data, p.floating.data)

    def test_landmarks_follow_truth(self):
        cfg = SynthConfig(sigma_k=1e-9)
        p = generate_pair(cfg, 3)
        # k on the reference should be the image of kh under the truth: kh + G(kh) = k
        from regsynth.imagecore import bilinear_sample

        u = p.truth.in_pixels()
        kh = p.landmarks.kh
        mapped = kh + np.stack([bilinear_sample(u[c], kh[:, 0], kh[:, 1]) for c in range(2)], axis=1)
        assert np.abs(mapped - p.landmarks.k).max() < 0.1

    def test_dataset_roundtrip(self, tmp_path):
        generate_dataset(tmp_path, 2, SynthConfig(n_landmarks=4))
        names = {f.name for f in (tmp_path / "pair_0").iterdir()}
        assert {"ref.png", "float.png", "truth_field.raw", "truth_field.raw.json", "landmarks.csv", "meta.json"} <= names
        pair = read_pair(tmp_path / "pair_1")
        orig = generate_pair(SynthConfig(n_landmarks=4), 1)
        np.testing.assert_array_equal(pair.reference.data, orig.reference.data)
        np.testing.assert_allclose(pair.truth.data, orig.truth.data, atol=1e-5)
        np.testing.assert_array_equal(pair.mask, orig.mask)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SynthConfig(sigma_v=-1)
        with pytest.raises(ValueError):
            SynthConfig(smoothing_mm=0)
