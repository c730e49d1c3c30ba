import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regsynth.forest import (
    ForestHyperparams,
    ForestModel,
    _draw_training_pixels,
    fit_tree,
    fuse_guesses,
    predict,
    train_forest,
    tree_guesses,
)
from regsynth.imagecore import Image2D, gaussian_derivative_features, gaussian_smooth
from regsynth.synthgen import generate_phantom_pair
from regsynth.vem import ExplicitCatalog, PosteriorField, ShiftCatalog, init_posteriors


def point_mass(shape, catalog, index):
    p = np.zeros((int(np.prod(shape)), catalog.size))
    p[:, index] = 1.0
    return PosteriorField(p, tuple(shape))


def small_problem(seed=0, size=64, smooth=1.5):
    a, b = generate_phantom_pair(size, seed)
    img = Image2D(gaussian_smooth(a.data, smooth), a.spacing)
    return img, gaussian_derivative_features(img, (0.0, 2.0), 2)


class TestHyperparams:
    def test_defaults(self):
        h = ForestHyperparams()
        assert (h.a, h.b, h.n_trees, h.min_leaf_size, h.features_per_node) == (2.0, 1250.0, 100, 5, 5)
        assert h.image_bag_fraction == 0.66 and h.pixel_bag_fraction == 0.66 and h.pixels_per_tree == 25_000

    @pytest.mark.parametrize("kw", [{"a": 1.0}, {"b": -1.0}, {"n_trees": 0}, {"min_leaf_size": 0},
                                    {"features_per_node": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ForestHyperparams(**kw)


class TestFusion:
    def test_agreeing_trees(self):
        mu, var = fuse_guesses(np.full((100, 3), 42.0), 2.0, 1250.0)
        np.testing.assert_allclose(mu, 42.0)
        np.testing.assert_allclose(var, 2500 / 104, rtol=0, atol=1e-9)

    def test_two_guesses(self):
        mu, var = fuse_guesses(np.array([[10.0], [20.0]]), 2.0, 1250.0)
        assert mu[0] == 15.0
        assert var[0] == pytest.approx(425.0, abs=1e-9)

    def test_degenerate_prior(self):
        _, var = fuse_guesses(np.array([[7.0], [7.0]]), 2.0, 0.0)
        assert var[0] == 0.0

    @given(st.lists(st.floats(-300, 300), min_size=1, max_size=30), st.floats(0, 5000))
    def test_variance_floor(self, g, b):
        g = np.array(g)[:, None]
        _, var = fuse_guesses(g, 2.0, b)
        assert var[0] >= 2 * b / (4 + g.shape[0]) - 1e-12

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=20), st.floats(1.1, 2.0))
    def test_monotone_in_spread_and_b(self, g, scale):
        g = np.array(g)[:, None]
        _, v0 = fuse_guesses(g, 2.0, 100.0)
        _, v1 = fuse_guesses(g.mean() + scale * (g - g.mean()), 2.0, 100.0)
        _, v2 = fuse_guesses(g, 2.0, 100.0 * scale)
        assert v1[0] >= v0[0] - 1e-12 and v2[0] >= v0[0]

    def test_large_t_limit(self, rng):
        g = rng.normal(0, 3, (200_000, 1))
        _, var = fuse_guesses(g, 2.0, 1250.0)
        assert var[0] == pytest.approx(g.var(), rel=0.02)


class TestTree:
    def test_pure_leaves(self, rng):
        X = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        t = fit_tree(X, y, ForestHyperparams(min_leaf_size=1, features_per_node=4), 0)
        m = ForestModel([t], ForestHyperparams(n_trees=1), 4)
        np.testing.assert_allclose(tree_guesses(m, X)[0], y, atol=1e-12)

    def test_constant_target(self, rng):
        X = rng.normal(size=(200, 3))
        t = fit_tree(X, np.full(200, 9.0), ForestHyperparams(), 1)
        assert t.n_nodes == 1 and t.value[0] == 9.0

    @pytest.mark.parametrize("seed", range(3))
    def test_structure_invariants(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(500, 6))
        y = X[:, 0] * 3 + rng.normal(size=500)
        h = ForestHyperparams(min_leaf_size=5, features_per_node=3)
        t = fit_tree(X, y, h, seed)
        leaves = t.is_leaf()
        assert np.all(t.n_samples[leaves] >= 5)
        assert np.all(t.feature[~leaves] < 6)
        assert t.n_samples[0] == 500
        # children partition their parent
        inner = np.flatnonzero(~leaves)
        np.testing.assert_array_equal(t.n_samples[t.left[inner]] + t.n_samples[t.right[inner]], t.n_samples[inner])

    def test_max_depth(self, rng):
        X = rng.normal(size=(300, 2))
        t = fit_tree(X, X[:, 0], ForestHyperparams(max_depth=1, features_per_node=2), 0)
        assert t.n_nodes == 3

    def test_deterministic(self, rng):
        X = rng.normal(size=(300, 5))
        y = rng.normal(size=300)
        h = ForestHyperparams(features_per_node=2)
        a, b = fit_tree(X, y, h, 5), fit_tree(X, y, h, 5)
        np.testing.assert_array_equal(a.threshold, b.threshold)
        np.testing.assert_array_equal(a.feature, b.feature)

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_tree(np.zeros((0, 3)), np.zeros(0), ForestHyperparams(), 0)


class TestTraining:
    def test_self_synthesis_out_of_bag(self):
        img, feats = small_problem()
        cat = ShiftCatalog(1.0, 1.0)
        q = point_mass(img.shape, cat, cat.zero_index)
        h = ForestHyperparams(n_trees=20)
        model = train_forest([feats], [img], [q], cat, h, seed=3)
        g = tree_guesses(model, feats.flat())
        inbag = np.zeros(g.shape, bool)
        for t in range(h.n_trees):
            for _, pix in _draw_training_pixels(1, [img.data.size], [0], h, 3, t):
                inbag[t, pix] = True
        oob = ~inbag
        has = oob.any(axis=0)
        pred = (g * oob).sum(axis=0)[has] / oob.sum(axis=0)[has]
        rms = np.sqrt(np.mean((pred - img.data.ravel()[has]) ** 2))
        assert rms < 3.0

    def test_constant_target_any_posterior(self):
        img, feats = small_problem()
        cat = ShiftCatalog(2.0, 1.0)
        target = Image2D(np.full(img.shape, 77.0))
        model = train_forest([feats], [target], [init_posteriors(img.shape, cat)], cat, ForestHyperparams(n_trees=3))
        pred = predict(model, feats)
        np.testing.assert_allclose(pred.mean, 77.0)

    def test_samples_shifted_target(self):
        # a ramp target and a point mass on a +2 px shift: the tree learns ramp + 2
        h, w = 20, 24
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        target = Image2D(xx.copy())
        feats = gaussian_derivative_features(Image2D(xx), (0.0,), 0)
        cat = ExplicitCatalog([[0.0, 0.0], [2.0, 0.0]])
        q = point_mass((h, w), cat, 1)
        model = train_forest([feats], [target], [q], cat, ForestHyperparams(n_trees=1, min_leaf_size=1,
                                                                          pixel_bag_fraction=1.0))
        np.testing.assert_allclose(predict(model, feats).mean, np.minimum(xx + 2, w - 1), atol=1e-12)

    def test_deterministic_given_seed(self):
        img, feats = small_problem()
        cat = ShiftCatalog(1.0, 1.0)
        q = init_posteriors(img.shape, cat)
        h = ForestHyperparams(n_trees=4)
        a = predict(train_forest([feats], [img], [q], cat, h, seed=9), feats)
        b = predict(train_forest([feats], [img], [q], cat, h, seed=9), feats)
        c = predict(train_forest([feats], [img], [q], cat, h, seed=10), feats)
        np.testing.assert_array_equal(a.mean, b.mean)
        assert not np.array_equal(a.mean, c.mean)

    def test_permutation_invariance(self):
        probs = [small_problem(s) for s in range(3)]
        cat = ShiftCatalog(1.0, 1.0)
        qs = [init_posteriors(p[0].shape, cat) for p in probs]
        h = ForestHyperparams(n_trees=4, pixels_per_tree=3000)
        ids = [10, 11, 12]
        m1 = train_forest([p[1] for p in probs], [p[0] for p in probs], qs, cat, h, 2, ids)
        order = [2, 0, 1]
        m2 = train_forest([probs[i][1] for i in order], [probs[i][0] for i in order], [qs[i] for i in order], cat, h,
                          2, [ids[i] for i in order])
        np.testing.assert_array_equal(predict(m1, probs[0][1]).mean, predict(m2, probs[0][1]).mean)

    def test_image_bagging_budget(self):
        h = ForestHyperparams()
        draws = _draw_training_pixels(20, [4096] * 20, list(range(20)), h, 0, 0)
        assert len(draws) == 13
        assert sum(p.size for _, p in draws) >= 25_000

    def test_single_image_pixel_bag(self):
        draws = _draw_training_pixels(1, [4096], [0], ForestHyperparams(), 0, 0)
        assert len(draws) == 1 and draws[0][1].size == round(0.66 * 4096)
        assert np.unique(draws[0][1]).size == draws[0][1].size

    def test_errors(self):
        img, feats = small_problem()
        cat = ShiftCatalog(1.0, 1.0)
        q = init_posteriors(img.shape, cat)
        with pytest.raises(ValueError):
            train_forest([], [], [], cat)
        with pytest.raises(ValueError):
            train_forest([feats], [Image2D(np.zeros((10, 10)))], [q], cat)
        with pytest.raises(ValueError):
            train_forest([feats], [img], [], cat)


class TestPrediction:
    def test_floor_and_serialization(self, tmp_path):
        img, feats = small_problem()
        cat = ShiftCatalog(1.0, 1.0)
        h = ForestHyperparams(n_trees=5)
        model = train_forest([feats], [img], [init_posteriors(img.shape, cat)], cat, h)
        pred = predict(model, feats)
        assert pred.mean.shape == img.shape
        assert np.all(pred.var >= 2 * h.b / (2 * h.a + h.n_trees) - 1e-12)
        model.save(tmp_path / "m.json")
        back = ForestModel.load(tmp_path / "m.json")
        again = predict(back, feats)
        np.testing.assert_array_equal(again.mean, pred.mean)
        np.testing.assert_array_equal(again.var, pred.var)
        assert back.hyper == h

    def test_feature_mismatch(self):
        img, feats = small_problem()
        cat = ShiftCatalog(1.0, 1.0)
        model = train_forest([feats], [img], [init_posteriors(img.shape, cat)], cat, ForestHyperparams(n_trees=1))
        with pytest.raises(ValueError):
            predict(model, gaussian_derivative_features(img, (0.0,), 1))

    def test_bad_document(self):
        with pytest.raises(ValueError):
            ForestModel.from_json({"format": "other"})
        with pytest.raises(ValueError):
            ForestModel.from_json({"format": "regsynth-forest", "version": 999})
