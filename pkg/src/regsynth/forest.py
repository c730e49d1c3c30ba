"""Regression forest for contrast synthesis.

Trees are trained on targets drawn from the current shift posteriors (one
sampled shift per training pixel and tree) and their guesses are fused with an
Inverse-Gamma prior into a per-pixel predictive mean and variance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .imagecore import FeatureStack, Image2D, bilinear_sample

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestHyperparams:
    a: float = 2.0
    b: float = 25.0**2 * 2.0
    n_trees: int = 100
    min_leaf_size: int = 5
    features_per_node: int = 5
    image_bag_fraction: float = 0.66
    pixels_per_tree: int = 25_000
    pixel_bag_fraction: float = 0.66
    max_depth: int | None = None

    def __post_init__(self):
        if not self.a > 1:
            raise ValueError("a must be > 1")
        if not self.b >= 0:
            raise ValueError("b must be non-negative")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")
        if self.features_per_node < 1:
            raise ValueError("features_per_node must be >= 1")


@dataclass(frozen=True)
class SynthesisPrediction:
    mean: np.ndarray
    var: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def is_leaf(self) -> np.ndarray:
        return self.feature < 0


@dataclass
class ForestModel:
    trees: list
    hyper: ForestHyperparams
    n_features: int
    feature_names: tuple = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {
            "format": "regsynth-forest",
            "version": FORMAT_VERSION,
            "hyperparams": asdict(self.hyper),
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                    "n_samples": t.n_samples.tolist(),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ForestModel":
        if doc.get("format") != "regsynth-forest":
            raise ValueError("not a regsynth forest document")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported forest format version {doc.get('version')}")
        trees = [
            Tree(
                np.asarray(t["feature"], np.int64),
                np.asarray(t["threshold"], np.float64),
                np.asarray(t["left"], np.int64),
                np.asarray(t["right"], np.int64),
                np.asarray(t["value"], np.float64),
                np.asarray(t["n_samples"], np.int64),
            )
            for t in doc["trees"]
        ]
        return cls(trees, ForestHyperparams(**doc["hyperparams"]), int(doc["n_features"]), tuple(doc["feature_names"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ForestModel":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- tree growing -------------------------------------------------------------


@numba.njit(cache=True)
def _grow_tree(X, y, min_leaf, mtry, max_depth, seed):
    np.random.seed(seed)
    n, n_feat = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    depth = np.zeros(cap, np.int64)

    idx = np.arange(n)
    # node ranges into idx
    start = np.zeros(cap, np.int64)
    stop = np.zeros(cap, np.int64)
    stack = np.zeros(cap, np.int64)
    sp = 0
    n_nodes = 1
    start[0] = 0
    stop[0] = n
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        lo = start[node]
        hi = stop[node]
        m = hi - lo
        s = 0.0
        ss = 0.0
        for k in range(lo, hi):
            v = y[idx[k]]
            s += v
            ss += v * v
        mean = s / m
        value[node] = mean
        count[node] = m
        sse = ss - s * mean
        if m < 2 * min_leaf or sse <= 1e-12 * max(1.0, ss) or (max_depth >= 0 and depth[node] >= max_depth):
            continue
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        order = np.random.permutation(n_feat)
        tried = 0
        vals = np.empty(m)
        tgt = np.empty(m)
        for fi in range(n_feat):
            if tried >= mtry:
                break
            f = order[fi]
            for k in range(m):
                vals[k] = X[idx[lo + k], f]
            perm = np.argsort(vals, kind="mergesort")
            if vals[perm[m - 1]] <= vals[perm[0]]:
                continue  # constant here; does not count against mtry
            tried += 1
            for k in range(m):
                tgt[k] = y[idx[lo + perm[k]]]
            ls = 0.0
            for k in range(m - 1):
                ls += tgt[k]
                nl = k + 1
                nr = m - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                a = vals[perm[k]]
                b = vals[perm[k + 1]]
                if b <= a:
                    continue
                rs = s - ls
                gain = ls * ls / nl + rs * rs / nr - s * mean
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (a + b)
                    if best_thr >= b:
                        best_thr = a
        if best_f < 0:
            continue
        # partition idx[lo:hi] in place
        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        start[lc] = lo
        stop[lc] = i
        start[rc] = i
        stop[rc] = hi
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack[sp] = rc
        stack[sp + 1] = lc
        sp += 2
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
    )


@numba.njit(cache=True)
def _apply_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@numba.njit(cache=True)
def _sample_rows(probs, rows, u):
    """Inverse-CDF draw of one column per requested row of a row-stochastic matrix."""
    out = np.empty(rows.size, np.int64)
    S = probs.shape[1]
    for i in range(rows.size):
        r = rows[i]
        tot = 0.0
        for s in range(S):
            tot += probs[r, s]
        target = u[i] * tot
        acc = 0.0
        pick = -1
        for s in range(S):
            p = probs[r, s]
            if p <= 0.0:
                continue
            acc += p
            pick = s
            if acc > target:
                break
        out[i] = pick
    return out


def fit_tree(X, y, hyper: ForestHyperparams, seed: int) -> Tree:
    """Grow one variance-reduction regression tree."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    max_depth = -1 if hyper.max_depth is None else int(hyper.max_depth)
    mtry = min(hyper.features_per_node, X.shape[1])
    return Tree(*_grow_tree(X, y, int(hyper.min_leaf_size), int(mtry), max_depth, int(seed) % (2**31)))


def tree_guesses(model: ForestModel, X) -> np.ndarray:
    """Per-tree guesses, shape (n_trees, n_samples)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    return np.stack([_apply_tree(X, t.feature, t.threshold, t.left, t.right, t.value) for t in model.trees])


def fuse_guesses(guesses, a: float, b: float):
    """Predictive mean and variance from tree guesses (axis 0) under the IG prior."""
    g = np.asarray(guesses, dtype=np.float64)
    T = g.shape[0]
    mu = g.mean(axis=0)
    var = (2 * b + ((g - mu) ** 2).sum(axis=0)) / (2 * a + T)
    return mu, var


def predict(model: ForestModel, features: FeatureStack) -> SynthesisPrediction:
    h, w, _ = features.values.shape
    mu, var = fuse_guesses(tree_guesses(model, features.flat()), model.hyper.a, model.hyper.b)
    return SynthesisPrediction(mu.reshape(h, w), var.reshape(h, w))


def _tree_rng(seed, tree, *extra):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tree), *map(int, extra)]))


def _draw_training_pixels(n_images, npix, image_ids, hyper, seed, tree):
    """(image position, pixel index) pairs for one tree, keyed by image id."""
    order = np.argsort(image_ids, kind="stable")
    rng = _tree_rng(seed, tree)
    if n_images == 1:
        n_take = max(1, int(round(hyper.pixel_bag_fraction * npix[0])))
        pix = np.sort(_tree_rng(seed, tree, image_ids[0]).choice(npix[0], n_take, replace=False))
        return [(0, pix)]
    n_bag = max(1, int(round(hyper.image_bag_fraction * n_images)))
    bag = np.sort(rng.choice(n_images, n_bag, replace=False))
    chosen = [order[i] for i in bag]
    per_image = int(np.ceil(hyper.pixels_per_tree / n_bag))
    draws = []
    for pos in chosen:
        r = _tree_rng(seed, tree, image_ids[pos])
        if per_image <= npix[pos]:
            pix = np.sort(r.choice(npix[pos], per_image, replace=False))
        else:
            pix = np.sort(r.integers(0, npix[pos], per_image))
        draws.append((pos, pix))
    return draws


def train_forest(features, targets, posteriors, catalog, hyper: ForestHyperparams | None = None, seed: int = 0,
                 image_ids=None) -> ForestModel:
    """Train the synthesis forest under the current shift posteriors.

    Parameters
    ----------
    features : list of FeatureStack
        Features computed on each floating image H_n.
    targets : list of Image2D
        Reference images M_n; the target for pixel x is M_n(x + shift).
    posteriors : list of PosteriorField
        Shift distributions per pair, on the H_n grids.
    catalog : ShiftCatalog
    seed : int
        Root seed; tree ``t`` uses a stream derived from ``(seed, t)``.
    image_ids : sequence of int, optional
        Stable identifiers keying the random draws, so reordering pairs does
        not change the model.
    """
    hyper = hyper or ForestHyperparams()
    n_images = len(features)
    if n_images == 0:
        raise ValueError("empty training set")
    if not (len(targets) == len(posteriors) == n_images):
        raise ValueError("features, targets and posteriors must have equal length")
    image_ids = list(range(n_images)) if image_ids is None else [int(i) for i in image_ids]
    n_feat = features[0].n_features
    flats = []
    npix = []
    for fs, tgt, q in zip(features, targets, posteriors):
        if fs.values.shape[:2] != tgt.shape or q.shape != tgt.shape:
            raise ValueError("feature, target and posterior grids must match")
        if fs.n_features != n_feat:
            raise ValueError("inconsistent feature dimension")
        flats.append(fs.flat())
        npix.append(tgt.data.size)
    if min(npix) == 0:
        raise ValueError("empty training set")
    shifts = np.asarray(catalog.shifts)

    trees = []
    for t in range(hyper.n_trees):
        Xs, ys = [], []
        for pos, pix in _draw_training_pixels(n_images, npix, image_ids, hyper, seed, t):
            r = _tree_rng(seed, t, image_ids[pos], 1)
            s_idx = _sample_rows(posteriors[pos].probs, pix.astype(np.int64), r.random(pix.size))
            tgt = targets[pos]
            px = pix % tgt.width + shifts[s_idx, 0] / tgt.spacing
            py = pix // tgt.width + shifts[s_idx, 1] / tgt.spacing
            Xs.append(flats[pos][pix])
            ys.append(bilinear_sample(tgt, px, py))
        X = np.concatenate(Xs)
        y = np.concatenate(ys)
        tree_seed = int(_tree_rng(seed, t, 2**32 - 1).integers(0, 2**31 - 1))
        trees.append(fit_tree(X, y, hyper, tree_seed))
    return ForestModel(trees, hyper, n_feat, tuple(features[0].names))
