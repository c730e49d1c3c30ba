"""Variational EM for joint synthesis and registration.

The deformation of each pair is a discrete MRF over a catalog of shifts; a
mean-field posterior q over shifts is kept per pixel and alternated with
retraining the synthesis forest on shift-sampled targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .forest import ForestHyperparams, ForestModel, SynthesisPrediction, predict, train_forest
from .imagecore import FeatureStack, Image2D, bilinear_sample, gaussian_derivative_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShiftCatalog:
    """Square grid of candidate shifts (mm), ordered row-major over (dy, dx)."""

    radius: float = 10.0
    step: float = 0.5

    def __post_init__(self):
        if not self.step > 0 or self.radius < 0:
            raise ValueError("catalog needs step > 0 and radius >= 0")

    @property
    def offsets(self) -> np.ndarray:
        k = int(np.floor(self.radius / self.step + 1e-9))
        return np.arange(-k, k + 1) * self.step

    @property
    def shifts(self) -> np.ndarray:
        o = self.offsets
        dy, dx = np.meshgrid(o, o, indexing="ij")
        return np.stack([dx.ravel(), dy.ravel()], axis=1)

    @property
    def size(self) -> int:
        return self.offsets.size ** 2

    @property
    def zero_index(self) -> int:
        return self.size // 2


class ExplicitCatalog:
    """Arbitrary list of shifts (mm); same interface as :class:`ShiftCatalog`."""

    def __init__(self, shifts):
        self.shifts = np.asarray(shifts, dtype=np.float64).reshape(-1, 2)
        if self.shifts.shape[0] == 0:
            raise ValueError("empty shift catalog")
        self.step = 1.0

    @property
    def size(self) -> int:
        return self.shifts.shape[0]

    @property
    def zero_index(self) -> int:
        hits = np.flatnonzero(np.all(self.shifts == 0, axis=1))
        return int(hits[0]) if hits.size else -1


@dataclass
class PosteriorField:
    """Per-pixel distribution over shifts; ``probs`` has shape (H * W, S)."""

    probs: np.ndarray
    shape: tuple

    def argmax_index(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1).reshape(self.shape)

    def argmax_shift(self, catalog) -> np.ndarray:
        """(2, H, W) most probable shift in mm."""
        s = np.asarray(catalog.shifts)[np.argmax(self.probs, axis=1)]
        return s.T.reshape((2,) + tuple(self.shape))

    def mean_shift(self, catalog) -> np.ndarray:
        return (self.probs @ np.asarray(catalog.shifts)).T.reshape((2,) + tuple(self.shape))

    def entropy(self) -> np.ndarray:
        p = self.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(p > 0, p * np.log(p), 0.0)
        return -t.sum(axis=1).reshape(self.shape)


@dataclass(frozen=True)
class MrfParams:
    beta1: float = 0.02
    beta2: float = 0.02

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("MRF weights must be non-negative")


@dataclass
class LandmarkSet:
    """Corresponding points: ``k`` on the reference (integer pixels), ``kh`` on the floating image.

    Coordinates are (x, y) in pixels; ``sigma_k`` is the placement std in mm.
    """

    k: np.ndarray
    kh: np.ndarray
    sigma_k: float = 0.5

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64).reshape(-1, 2)
        self.kh = np.asarray(self.kh, dtype=np.float64).reshape(-1, 2)
        if self.k.shape != self.kh.shape:
            raise ValueError("landmark arrays must have equal length")
        if not np.allclose(self.k, np.round(self.k)):
            raise ValueError("reference landmarks must sit on integer pixels")
        if not self.sigma_k > 0:
            raise ValueError("sigma_k must be positive")

    @classmethod
    def empty(cls, sigma_k=0.5):
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), sigma_k)

    def __len__(self):
        return self.k.shape[0]

    def subset(self, n: int) -> "LandmarkSet":
        return LandmarkSet(self.k[:n], self.kh[:n], self.sigma_k)


def init_posteriors(shape, catalog) -> PosteriorField:
    S = catalog.size
    if S < 1:
        raise ValueError("catalog must hold at least one shift")
    n = int(np.prod(shape))
    return PosteriorField(np.full((n, S), 1.0 / S), tuple(shape))


# --- per-pair potentials ------------------------------------------------------


def shifted_intensities(ref: Image2D, catalog) -> np.ndarray:
    """M(x + shift) for every pixel and shift, shape (H * W, S), clamped sampling."""
    h, w = ref.shape
    yy, xx = np.mgrid[0:h, 0:w]
    s = np.asarray(catalog.shifts) / ref.spacing
    out = np.empty((h * w, s.shape[0]), dtype=np.float32)
    xs = xx.ravel()[:, None]
    ys = yy.ravel()[:, None]
    chunk = 256
    for i in range(0, s.shape[0], chunk):
        out[:, i : i + chunk] = bilinear_sample(ref, xs + s[None, i : i + chunk, 0], ys + s[None, i : i + chunk, 1])
    return out


def landmark_log_factors(landmarks: LandmarkSet | None, catalog, shape, spacing):
    """Pixel indices and per-shift log landmark factors, applied at the reference pixel k."""
    if landmarks is None or len(landmarks) == 0:
        return np.zeros(0, np.int64), np.zeros((0, catalog.size))
    h, w = shape
    shifts = np.asarray(catalog.shifts)
    s2 = landmarks.sigma_k**2
    pix, rows = [], []
    for (kx, ky), (hx, hy) in zip(landmarks.k, landmarks.kh):
        ix, iy = int(round(kx)), int(round(ky))
        if not (0 <= ix < w and 0 <= iy < h):
            continue
        d = np.array([hx - kx, hy - ky]) * spacing + shifts
        rows.append(-0.5 * (d**2).sum(axis=1) / s2 - np.log(2 * np.pi * s2))
        pix.append(iy * w + ix)
    return np.asarray(pix, np.int64), np.asarray(rows).reshape(len(pix), -1)


def log_unary(shifted: np.ndarray, prediction: SynthesisPrediction, catalog, beta1: float,
              lm_pix=None, lm_log=None) -> np.ndarray:
    """Per-pixel log potentials: Gaussian likelihood, shift prior and landmarks."""
    mu = prediction.mean.reshape(-1, 1)
    var = prediction.var.reshape(-1, 1)
    out = -0.5 * (shifted - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var)
    out -= beta1 * (np.asarray(catalog.shifts) ** 2).sum(axis=1)[None, :]
    if lm_pix is not None and lm_pix.size:
        np.add.at(out, lm_pix, lm_log)
    return out


def neighbor_table(shape) -> np.ndarray:
    """4-connected neighbour indices per pixel, -1 padded, shape (H * W, 4)."""
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    nb = np.full((h, w, 4), -1, np.int64)
    nb[:, 1:, 0] = idx[:, :-1]
    nb[:, :-1, 1] = idx[:, 1:]
    nb[1:, :, 2] = idx[:-1, :]
    nb[:-1, :, 3] = idx[1:, :]
    return nb.reshape(-1, 4)


@numba.njit(cache=True)
def _sweep_sequential(q, unary, shifts, sq, nb, beta2, means):
    n, S = q.shape
    max_tv = 0.0
    logit = np.empty(S)
    for x in range(n):
        cnt = 0
        mx = 0.0
        my = 0.0
        for j in range(4):
            o = nb[x, j]
            if o >= 0:
                cnt += 1
                mx += means[o, 0]
                my += means[o, 1]
        best = -np.inf
        for s in range(S):
            v = unary[x, s] - beta2 * (cnt * sq[s] - 2.0 * (shifts[s, 0] * mx + shifts[s, 1] * my))
            logit[s] = v
            if v > best:
                best = v
        tot = 0.0
        for s in range(S):
            e = np.exp(logit[s] - best)
            logit[s] = e
            tot += e
        tv = 0.0
        ax = 0.0
        ay = 0.0
        for s in range(S):
            p = logit[s] / tot
            tv += abs(p - q[x, s])
            q[x, s] = p
            ax += p * shifts[s, 0]
            ay += p * shifts[s, 1]
        means[x, 0] = ax
        means[x, 1] = ay
        tv *= 0.5
        if tv > max_tv:
            max_tv = tv
    return max_tv


def _normalize_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def _sweep_checkerboard(q, unary, shifts, sq, nb, beta2, shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    color = ((yy + xx) % 2).ravel()
    max_tv = 0.0
    valid = nb >= 0
    cnt = valid.sum(axis=1)
    for c in (0, 1):
        sel = np.flatnonzero(color == c)
        means = q @ shifts
        nsum = np.where(valid[sel, :, None], means[np.where(valid[sel], nb[sel], 0)], 0.0).sum(axis=1)
        logits = unary[sel] - beta2 * (cnt[sel, None] * sq[None, :] - 2.0 * (nsum @ shifts.T))
        new = _normalize_rows(logits)
        max_tv = max(max_tv, 0.5 * float(np.abs(new - q[sel]).sum(axis=1).max()))
        q[sel] = new
    return max_tv


@dataclass
class EStepInfo:
    sweeps: int
    converged: bool
    max_change: float


def e_step(q: PosteriorField, unary: np.ndarray, catalog, mrf: MrfParams, tol: float = 1e-4,
           max_sweeps: int = 50, schedule: str = "sequential", callback=None) -> EStepInfo:
    """Mean-field fixed-point sweeps, updating ``q`` in place.

    Each pixel update sets
    q_x(s) ~ exp(unary[x, s] - beta2 * sum_{x' in B(x)} E_{q_x'} |shift_s - U(x')|^2),
    i.e. exact coordinate ascent of the variational bound for that pixel.
    ``unary`` comes from :func:`log_unary`. ``callback(sweep, q)`` is called
    after every sweep.
    """
    shifts = np.ascontiguousarray(catalog.shifts, dtype=np.float64)
    sq = (shifts**2).sum(axis=1)
    nb = neighbor_table(q.shape)
    unary = np.ascontiguousarray(unary, dtype=np.float64)
    change = np.inf
    sweeps = 0
    if schedule == "sequential":
        means = q.probs @ shifts
        for sweeps in range(1, max_sweeps + 1):
            change = _sweep_sequential(q.probs, unary, shifts, sq, nb, float(mrf.beta2), means)
            if callback is not None:
                callback(sweeps, q)
            if change < tol:
                break
    elif schedule == "checkerboard":
        for sweeps in range(1, max_sweeps + 1):
            change = _sweep_checkerboard(q.probs, unary, shifts, sq, nb, float(mrf.beta2), q.shape)
            if callback is not None:
                callback(sweeps, q)
            if change < tol:
                break
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    return EStepInfo(sweeps, bool(change < tol), float(change))


def edge_list(shape) -> np.ndarray:
    """Undirected 4-connected edges (i, j), each listed once."""
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return np.concatenate([horiz, vert])


def free_energy_terms(q: PosteriorField, unary: np.ndarray, catalog, beta2: float) -> dict:
    """Tractable terms of the variational bound for one pair (theta fixed).

    ``entropy`` + ``expected_unary`` (likelihood, shift prior and landmarks) +
    ``expected_pairwise`` (each undirected edge counted once). The MRF partition
    function is omitted.
    """
    p = q.probs
    shifts = np.asarray(catalog.shifts)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -float(np.where(p > 0, p * np.log(p), 0.0).sum())
        eu = float(np.where(p > 0, p * unary, 0.0).sum())
    m = p @ shifts
    m2 = p @ (shifts**2).sum(axis=1)
    e = edge_list(q.shape)
    pair = m2[e[:, 0]] + m2[e[:, 1]] - 2 * (m[e[:, 0]] * m[e[:, 1]]).sum(axis=1)
    ep = -beta2 * float(pair.sum())
    return {"entropy": ent, "expected_unary": eu, "expected_pairwise": ep, "total": ent + eu + ep}


def log_variance_prior(prediction: SynthesisPrediction, a: float, b: float) -> float:
    """Inverse-Gamma log density of the predicted variances, summed over pixels."""
    from scipy.special import gammaln

    v = prediction.var
    if b <= 0:
        return 0.0
    return float(np.sum(a * np.log(b) - gammaln(a) - (a + 1) * np.log(v) - b / v))


# --- the VEM driver ----------------------------------------------------------


@dataclass
class VemConfig:
    catalog: object = field(default_factory=ShiftCatalog)
    mrf: MrfParams = field(default_factory=MrfParams)
    forest: ForestHyperparams = field(default_factory=ForestHyperparams)
    scales: tuple = (0.0, 2.0, 4.0)
    max_order: int = 3
    max_outer: int = 10
    tol: float = 0.5
    e_tol: float = 1e-4
    e_max_sweeps: int = 50
    schedule: str = "sequential"
    seed: int = 0


class PairProblem:
    """Cached per-pair quantities for the E-step."""

    def __init__(self, ref: Image2D, flo: Image2D, landmarks: LandmarkSet | None, cfg: VemConfig):
        if ref.shape != flo.shape:
            raise ValueError("pairs must share a grid")
        self.ref = ref
        self.flo = flo
        self.landmarks = landmarks
        self.features: FeatureStack = gaussian_derivative_features(flo, cfg.scales, cfg.max_order)
        self.shifted = shifted_intensities(ref, cfg.catalog)
        self.lm_pix, self.lm_log = landmark_log_factors(landmarks, cfg.catalog, ref.shape, ref.spacing)

    def unary(self, prediction: SynthesisPrediction, cfg: VemConfig) -> np.ndarray:
        return log_unary(self.shifted, prediction, cfg.catalog, cfg.mrf.beta1, self.lm_pix, self.lm_log)


@dataclass
class VemState:
    posteriors: list
    model: ForestModel | None = None
    predictions: list = field(default_factory=list)
    free_energy: float = float("nan")
    iteration: int = 0


@dataclass
class VemResult:
    model: ForestModel
    predictions: list
    posteriors: list
    iterations: int
    converged: bool
    history: list


def free_energy(state: VemState, problems, cfg: VemConfig) -> float:
    """Bound J up to the MRF partition functions, summed over pairs, plus the variance prior."""
    total = 0.0
    for q, prob, pred in zip(state.posteriors, problems, state.predictions):
        total += free_energy_terms(q, prob.unary(pred, cfg), cfg.catalog, cfg.mrf.beta2)["total"]
        total += log_variance_prior(pred, cfg.forest.a, cfg.forest.b)
    return total


def run_vem(pairs, landmarks=None, cfg: VemConfig | None = None, image_ids=None) -> VemResult:
    """Alternate E-steps (mean field) and M-steps (forest retraining).

    ``pairs`` is a list of (reference, floating) images; the forest predicts
    reference intensities from floating-image features. Stops when the
    predicted means and standard deviations change by less than ``cfg.tol``
    everywhere, or after ``cfg.max_outer`` rounds.
    """
    cfg = cfg or VemConfig()
    if len(pairs) == 0:
        raise ValueError("run_vem needs at least one image pair")
    if landmarks is None:
        landmarks = [None] * len(pairs)
    problems = [PairProblem(m, h, lm, cfg) for (m, h), lm in zip(pairs, landmarks)]
    state = VemState([init_posteriors(p.ref.shape, cfg.catalog) for p in problems])

    def m_step():
        # Same root seed every round: draws stay coupled across iterations.
        model = train_forest([p.features for p in problems], [p.ref for p in problems], state.posteriors,
                             cfg.catalog, cfg.forest, seed=cfg.seed, image_ids=image_ids)
        return model, [predict(model, p.features) for p in problems]

    state.model, state.predictions = m_step()
    history = []
    converged = False
    for it in range(1, cfg.max_outer + 1):
        for q, prob, pred in zip(state.posteriors, problems, state.predictions):
            info = e_step(q, prob.unary(pred, cfg), cfg.catalog, cfg.mrf, cfg.e_tol, cfg.e_max_sweeps, cfg.schedule)
            log.debug("iteration %d: E-step %d sweeps (change %.2e)", it, info.sweeps, info.max_change)
        state.free_energy = free_energy(state, problems, cfg)
        old = state.predictions
        state.model, state.predictions = m_step()
        state.iteration = it
        d_mu = max(float(np.abs(n.mean - o.mean).max()) for n, o in zip(state.predictions, old))
        d_sd = max(float(np.abs(n.std - o.std).max()) for n, o in zip(state.predictions, old))
        history.append({"iteration": it, "free_energy": state.free_energy, "max_dmu": d_mu, "max_dsigma": d_sd})
        log.info("VEM iteration %d: J=%.6g max|dmu|=%.3f max|dsigma|=%.3f", it, state.free_energy, d_mu, d_sd)
        if d_mu < cfg.tol and d_sd < cfg.tol:
            converged = True
            break
    return VemResult(state.model, state.predictions, state.posteriors, state.iteration, converged, history)
