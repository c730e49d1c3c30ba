"""Final registration given a trained synthesis.

Three routes: discrete MAP over the shift catalog by expansion moves, a cubic
B-spline FFD fitted to the predicted mean/variance, and the mutual-information
FFD baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import maxflow
import numpy as np
from scipy import ndimage

from .deformation import (
    DeformationField,
    FfdTransform,
    basis_matrix,
    bspline_weights,
    ffd_to_field,
    get_basis,
    refine_ffd,
    regularizer_terms,
)
from .forest import SynthesisPrediction
from .imagecore import Image2D, bilinear_sample, gaussian_smooth
from .vem import LandmarkSet, MrfParams, edge_list

log = logging.getLogger(__name__)


@dataclass
class RegistrationEnergyConfig:
    beta1: float = 0.02
    beta2: float = 0.02
    alpha: float | None = None  # None: 2 / (9 |Omega|) per level
    sigma_k: float = 0.5
    beta_b: float = 0.001
    beta_l: float = 0.01
    beta_j: float = 0.0
    spacing_mm: float = 6.0
    data_term: str = "synthesis"
    mi_bins: int = 64
    levels: int = 3
    max_iter: int = 300
    gtol: float = 1e-6

    def __post_init__(self):
        if self.data_term not in ("synthesis", "mutual-information"):
            raise ValueError(f"unknown data term {self.data_term!r}")
        if self.levels < 1 or self.mi_bins < 8 or not self.spacing_mm > 0:
            raise ValueError("invalid registration config")


# --- discrete MAP by expansion moves ------------------------------------------


def discrete_energy(labels, unary, edges, pair_cost) -> float:
    labels = np.asarray(labels)
    return float(unary[np.arange(unary.shape[0]), labels].sum() + pair_cost[labels[edges[:, 0]], labels[edges[:, 1]]].sum())


def _expansion_move(labels, alpha, unary, edges, move_cost):
    n = unary.shape[0]
    idx = np.arange(n)
    d0 = unary[idx, labels]
    d1 = unary[:, alpha].copy()
    d1[labels == alpha] = d0[labels == alpha]
    a = labels[edges[:, 0]]
    b = labels[edges[:, 1]]
    e00 = move_cost[a, b]
    e01 = move_cost[a, alpha]
    e10 = move_cost[alpha, b]
    # Non-submodular terms are made submodular by lowering the both-switch cost, which
    # keeps the current labelling and every single switch exact; the caller accepts
    # only true improvements.
    e11 = np.minimum(move_cost[alpha, alpha], e01 + e10 - e00)
    lin = d1 - d0
    np.add.at(lin, edges[:, 0], e10 - e00)
    np.add.at(lin, edges[:, 1], e11 - e10)
    w = e01 + e10 - e00 - e11
    g = maxflow.Graph[float](n, edges.shape[0])
    nodes = g.add_nodes(n)
    g.add_grid_tedges(nodes, np.maximum(lin, 0), np.maximum(-lin, 0))
    keep = w > 0
    if keep.any():
        g.add_edges(nodes[edges[keep, 0]], nodes[edges[keep, 1]], w[keep], np.zeros(keep.sum()))
    g.maxflow()
    switch = g.get_grid_segments(nodes)
    out = labels.copy()
    out[switch] = alpha
    return out


def alpha_expansion(unary, edges, pair_cost, move_cost=None, init=None, max_passes=10, label_order=None):
    """Move-making minimization of sum_i unary[i, l_i] + sum_edges pair_cost[l_i, l_j].

    ``move_cost`` is the (possibly truncated) pairwise table used to build each
    move; a move is kept only if it lowers the true energy. Returns the labels,
    the final energy and the energy after every pass.
    """
    unary = np.asarray(unary, dtype=np.float64)
    n, S = unary.shape
    if S == 0:
        raise ValueError("empty label set")
    move_cost = pair_cost if move_cost is None else move_cost
    labels = np.argmin(unary, axis=1) if init is None else np.asarray(init).copy()
    energy = discrete_energy(labels, unary, edges, pair_cost)
    pass_energies = [energy]
    order = np.arange(S) if label_order is None else label_order
    for _ in range(max_passes):
        improved = False
        for alpha in order:
            cand = _expansion_move(labels, alpha, unary, edges, move_cost)
            e = discrete_energy(cand, unary, edges, pair_cost)
            if e < energy - 1e-12 * max(1.0, abs(energy)):
                labels, energy, improved = cand, e, True
        if pass_energies and energy > pass_energies[-1] + 1e-9 * max(1.0, abs(pass_energies[-1])):
            raise AssertionError("expansion pass increased the energy")
        pass_energies.append(energy)
        if not improved:
            break
    return labels, energy, pass_energies


def graphcut_unaries(ref: Image2D, prediction: SynthesisPrediction, landmarks, mrf: MrfParams, catalog):
    """Unary costs (H * W, S): image term, shift prior and landmark terms."""
    from .vem import shifted_intensities

    shifts = np.asarray(catalog.shifts)
    mu = prediction.mean.reshape(-1, 1)
    var = prediction.var.reshape(-1, 1)
    un = (shifted_intensities(ref, catalog) - mu) ** 2 / (2 * var)
    un += mrf.beta1 * (shifts**2).sum(axis=1)[None, :]
    if landmarks is not None and len(landmarks):
        h, w = ref.shape
        s2 = landmarks.sigma_k**2
        for (kx, ky), (hx, hy) in zip(landmarks.k, landmarks.kh):
            ix, iy = int(round(hx)), int(round(hy))
            if 0 <= ix < w and 0 <= iy < h:
                d = np.array([hx - kx, hy - ky]) * ref.spacing + shifts
                un[iy * w + ix] += (d**2).sum(axis=1) / (2 * s2)
    return un


def minimize_shift_labeling(unary, edges, shifts, beta2: float, step: float = 1.0, max_passes: int = 5):
    """Minimize sum unary + beta2 * sum_edges |shift_i - shift_j|^2 over shift labels.

    Moves are built with the squared distance truncated at (8 * step)^2. A second
    start from the zero-shift labelling escapes some local minima of the non-metric
    cost; the better of the two runs is returned as (labels, energy, pass energies).
    """
    shifts = np.asarray(shifts, dtype=np.float64)
    d2 = ((shifts[:, None, :] - shifts[None, :, :]) ** 2).sum(axis=2)
    tau = (2 * step * 4) ** 2
    pair, move = beta2 * d2, beta2 * np.minimum(d2, tau)
    best = alpha_expansion(unary, edges, pair, move, max_passes=max_passes)
    zero = np.flatnonzero(np.all(shifts == 0, axis=1))
    if zero.size:
        alt = alpha_expansion(unary, edges, pair, move, init=np.full(unary.shape[0], zero[0]), max_passes=max_passes)
        if alt[1] < best[1]:
            best = alt
    return best


@dataclass
class GraphCutResult:
    field: DeformationField
    labels: np.ndarray
    energy: float
    pass_energies: list


def map_registration_graphcut(ref: Image2D, prediction: SynthesisPrediction, landmarks, mrf: MrfParams, catalog,
                              max_passes: int = 5) -> GraphCutResult:
    shifts = np.asarray(catalog.shifts)
    if shifts.shape[0] == 0:
        raise ValueError("empty shift catalog")
    unary = graphcut_unaries(ref, prediction, landmarks, mrf, catalog)
    labels, energy, passes = minimize_shift_labeling(unary, edge_list(ref.shape), shifts, mrf.beta2,
                                                     getattr(catalog, "step", 1.0), max_passes)
    disp = shifts[labels].T.reshape((2,) + ref.shape)
    return GraphCutResult(DeformationField(disp, ref.spacing), labels.reshape(ref.shape), energy, passes)


# --- smooth image interpolation ------------------------------------------------


class CubicImage:
    """Cubic B-spline interpolant with mirror extension and clamped coordinates.

    The derivative vanishes at the image border, so clamping keeps the
    interpolant continuously differentiable.
    """

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.coef = ndimage.spline_filter(self.data, order=3, mode="mirror")

    @staticmethod
    def _mirror(i, n):
        i = np.abs(i)
        return np.where(i > n - 1, 2 * (n - 1) - i, i)

    def sample(self, x, y, grad=True):
        h, w = self.data.shape
        xc = np.clip(x, 0, w - 1)
        yc = np.clip(y, 0, h - 1)
        cx = np.floor(xc).astype(np.intp)
        cy = np.floor(yc).astype(np.intp)
        ux, uy = xc - cx, yc - cy
        wx, wy = bspline_weights(ux), bspline_weights(uy)
        dwx, dwy = (bspline_weights(ux, 1), bspline_weights(uy, 1)) if grad else (None, None)
        val = np.zeros_like(xc)
        gx = np.zeros_like(xc) if grad else None
        gy = np.zeros_like(xc) if grad else None
        for a in range(4):
            iy = self._mirror(cy + a - 1, h)
            for b in range(4):
                ix = self._mirror(cx + b - 1, w)
                c = self.coef[iy, ix]
                val += wy[a] * wx[b] * c
                if grad:
                    gx += wy[a] * dwx[b] * c
                    gy += dwy[a] * wx[b] * c
        if grad:
            gx = np.where((x < 0) | (x > w - 1), 0.0, gx)
            gy = np.where((y < 0) | (y > h - 1), 0.0, gy)
        return val, gx, gy


def downsample(data: np.ndarray) -> np.ndarray:
    return gaussian_smooth(data, 1.0)[::2, ::2]


# --- mutual information -----------------------------------------------------------


def _bin_index(data, bins):
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return None
    return np.minimum(((data - lo) / (hi - lo) * bins).astype(np.intp), bins - 1)


def _mi_from_joint(joint):
    p = joint / joint.sum()
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz])).sum())


def entropy(img, bins: int = 64) -> float:
    data = img.data if isinstance(img, Image2D) else np.asarray(img, float)
    idx = _bin_index(data, bins)
    if idx is None:
        return 0.0
    p = np.bincount(idx.ravel(), minlength=bins) / idx.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b, bins: int = 64, field: DeformationField | None = None) -> float:
    """Histogram mutual information (nats) between ``a`` and ``b``.

    Without ``field`` the images are compared pixel by pixel. With ``field``,
    ``a`` is evaluated at x + U(x) by partial-volume interpolation: the four
    neighbouring pixels' bins receive the bilinear weights.
    """
    A = a.data if isinstance(a, Image2D) else np.asarray(a, float)
    B = b.data if isinstance(b, Image2D) else np.asarray(b, float)
    if A.shape != B.shape:
        raise ValueError("images must share a grid")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    ia = _bin_index(A, bins)
    ib = _bin_index(B, bins)
    if ia is None or ib is None:
        return 0.0
    joint = np.zeros((bins, bins))
    if field is None:
        np.add.at(joint, (ia.ravel(), ib.ravel()), 1.0)
    else:
        h, w = A.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        u = field.data / field.spacing
        x = np.clip(xx + u[0], 0, w - 1)
        y = np.clip(yy + u[1], 0, h - 1)
        x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
        y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                np.add.at(joint, (ia[y0 + dy, x0 + dx].ravel(), ib.ravel()), (wy * wx).ravel())
    return _mi_from_joint(joint)


# --- FFD objectives ------------------------------------------------------------------


def _landmark_mm(landmarks: LandmarkSet | None, spacing):
    if landmarks is None or len(landmarks) == 0:
        return None, None
    return landmarks.kh * spacing, landmarks.k * spacing


class _LevelObjective:
    """Objective of one pyramid level as a function of the flattened coefficients."""

    def __init__(self, t: FfdTransform, moving: np.ndarray, spacing: float, cfg: RegistrationEnergyConfig,
                 landmarks=None, mean=None, var=None, fixed=None):
        self.t = t.copy()
        self.cfg = cfg
        self.shape = moving.shape
        self.spacing = spacing
        self.basis = get_basis(t, moving.shape, spacing)
        self.image = CubicImage(moving)
        h, w = moving.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        self.px = xx.ravel()
        self.py = yy.ravel()
        self.n_pix = h * w
        self.mean = None if mean is None else mean.ravel()
        self.var = None if var is None else var.ravel()
        self.alpha = cfg.alpha if cfg.alpha is not None else 2.0 / (9.0 * self.n_pix)
        self.lm_src = None
        if landmarks is not None and landmarks[0] is not None:
            kh_mm, k_mm = landmarks
            # landmarks outside the FFD support are ignored
            ex, ey = t.extent
            ok = (kh_mm[:, 0] >= 0) & (kh_mm[:, 0] <= ex) & (kh_mm[:, 1] >= 0) & (kh_mm[:, 1] <= ey)
            if ok.any():
                self.lm_src = kh_mm[ok]
                self.lm_dst = k_mm[ok]
                self.lm_B = basis_matrix(t, self.lm_src[:, 0], self.lm_src[:, 1])
        if fixed is not None:
            self._setup_mi(moving, fixed)

    def _setup_mi(self, moving, fixed):
        bins = self.cfg.mi_bins
        self.fixed_bins = _bin_index(fixed, bins - 4)
        self.fixed_bins = (self.fixed_bins if self.fixed_bins is not None else np.zeros(fixed.shape, np.intp)).ravel() + 2
        lo, hi = float(moving.min()), float(moving.max())
        hi = hi if hi > lo else lo + 1.0
        self.mi_lo = lo
        self.mi_scale = (bins - 5) / (hi - lo)

    def displacement(self, cflat):
        c = cflat.reshape(2, -1)
        return self.basis.B @ c[0], self.basis.B @ c[1]

    def _warped(self, cflat, grad=True):
        ux, uy = self.displacement(cflat)
        s = self.spacing
        return self.image.sample(self.px + ux / s, self.py + uy / s, grad)

    def image_term(self, cflat, grad=True):
        val, gx, gy = self._warped(cflat, grad)
        r = val - self.mean
        f = self.alpha * float(np.sum(r * r / (2 * self.var)))
        if not grad:
            return f, None
        dv = self.alpha * r / self.var / self.spacing
        return f, np.concatenate([self.basis.B.T @ (dv * gx), self.basis.B.T @ (dv * gy)])

    def mi_term(self, cflat, grad=True):
        """Negative Parzen-window mutual information and its gradient."""
        val, gx, gy = self._warped(cflat, grad)
        bins = self.cfg.mi_bins
        bm = np.clip((val - self.mi_lo) * self.mi_scale + 2.0, 1.0, bins - 2.0 - 1e-9)
        cell = np.floor(bm).astype(np.intp)
        u = bm - cell
        wts = bspline_weights(u)
        joint = np.zeros((bins, bins))
        for k in range(4):
            np.add.at(joint, (cell + k - 1, self.fixed_bins), wts[k])
        joint /= self.n_pix
        pm = joint.sum(axis=1)
        pf = joint.sum(axis=0)
        nz = joint > 0
        mi = float((joint[nz] * np.log(joint[nz] / np.outer(pm, pf)[nz])).sum())
        if not grad:
            return -mi, None
        with np.errstate(divide="ignore", invalid="ignore"):
            L = np.where(nz, np.log(joint / pm[:, None]), 0.0)
        dw = bspline_weights(u, 1)
        dmi = np.zeros(self.n_pix)
        for k in range(4):
            # d/d(bm) of weight for bin cell+k-1 is dw[k]
            dmi += dw[k] * L[cell + k - 1, self.fixed_bins]
        inside = (val - self.mi_lo) * self.mi_scale + 2.0
        dmi *= ((inside > 1.0) & (inside < bins - 2.0 - 1e-9)) * self.mi_scale / self.n_pix
        dv = -dmi / self.spacing
        return -mi, np.concatenate([self.basis.B.T @ (dv * gx), self.basis.B.T @ (dv * gy)])

    def landmark_term(self, cflat, grad=True):
        if self.lm_src is None:
            return 0.0, (np.zeros_like(cflat) if grad else None)
        c = cflat.reshape(2, -1)
        r = self.lm_src + np.stack([self.lm_B @ c[0], self.lm_B @ c[1]], axis=1) - self.lm_dst
        s2 = self.cfg.sigma_k**2
        f = float((r**2).sum() / (2 * s2))
        if not grad:
            return f, None
        return f, np.concatenate([self.lm_B.T @ r[:, 0], self.lm_B.T @ r[:, 1]]) / s2

    def __call__(self, cflat, grad=True):
        if self.mean is not None:
            fd, gd = self.image_term(cflat, grad)
        else:
            fd, gd = self.mi_term(cflat, grad)
        fl, gl = self.landmark_term(cflat, grad)
        self.t.coeffs = cflat.reshape(self.t.coeffs.shape)
        cfg = self.cfg
        fr, gr, (eb, el, ej) = regularizer_terms(self.t, self.basis, (cfg.beta_b, cfg.beta_l, cfg.beta_j), need_grad=grad)
        if cfg.beta_j > 0 and not np.isfinite(ej):
            return np.inf, (None if not grad else np.zeros_like(cflat)), {}
        terms = {"data": fd, "landmarks": fl, "bending": eb, "linear_elastic": el, "jacobian": ej}
        f = fd + fl + fr
        return f, (gd + gl + gr if grad else None), terms


def cg_minimize(fun, x0, max_iter=300, gtol=1e-6, init_step=1.0):
    """Polak-Ribiere+ conjugate gradient with Armijo backtracking.

    ``fun(x)`` returns ``(f, g, terms)``. The objective never increases
    between accepted iterates.
    """
    x = np.array(x0, dtype=np.float64)
    f, g, _ = fun(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    d = -g
    step = None
    history = [f]
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < gtol:
            converged = True
            break
        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = -gnorm**2
        dmax = float(np.abs(d).max())
        t = init_step / dmax if step is None else min(2.0 * step, 10.0 * init_step / dmax)
        accepted = False
        for _ in range(40):
            xn = x + t * d
            fn, gn, _ = fun(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.array_equal(d, -g):
                converged = True
                break
            d = -g
            step = None
            continue
        if fn > f:
            raise AssertionError("objective increased across an accepted step")
        beta = max(0.0, float(gn @ (gn - g)) / max(float(g @ g), 1e-300))
        x, f, g_old, g = xn, fn, g, gn
        d = -g + beta * d
        step = t
        history.append(f)
        if abs(history[-2] - f) <= 1e-12 * max(1.0, abs(f)) and beta == 0.0:
            converged = True
            break
    return x, {"iterations": it, "converged": converged, "history": history}


@dataclass
class FfdResult:
    transform: FfdTransform
    report: dict = field(default_factory=dict)

    def to_field(self, shape, spacing) -> DeformationField:
        return ffd_to_field(self.transform, shape, spacing)


def _pyramid(arr, levels):
    out = [np.asarray(arr, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out


def _run_pyramid(ref: Image2D, cfg: RegistrationEnergyConfig, landmarks, mean=None, var=None, fixed=None,
                 init: FfdTransform | None = None) -> FfdResult:
    levels = cfg.levels
    refs = _pyramid(ref.data, levels)
    means = _pyramid(mean, levels) if mean is not None else [None] * levels
    vars_ = _pyramid(var, levels) if var is not None else [None] * levels
    fixeds = _pyramid(fixed, levels) if fixed is not None else [None] * levels
    extent = ((ref.width - 1) * ref.spacing, (ref.height - 1) * ref.spacing)
    lms = _landmark_mm(landmarks, ref.spacing)
    t = init.copy() if init is not None else FfdTransform.identity(extent, cfg.spacing_mm * 2 ** (levels - 1))
    reports = []
    warn = False
    for lvl in range(levels - 1, -1, -1):
        if lvl < levels - 1:
            t = refine_ffd(t)
        sp = ref.spacing * 2**lvl
        obj = _LevelObjective(t, refs[lvl], sp, cfg, lms, means[lvl], vars_[lvl], fixeds[lvl])
        # A finer sampling grid can expose folds the coarser level never saw; pull the
        # start back towards the identity, which is always feasible.
        shrink = 0
        while not np.isfinite(obj(t.coeffs.ravel(), grad=False)[0]) and shrink < 60:
            t = FfdTransform(t.grid_spacing, 0.5 * t.coeffs, t.extent)
            shrink += 1
        x, info = cg_minimize(obj, t.coeffs.ravel(), cfg.max_iter, cfg.gtol, init_step=0.5 * sp)
        t = FfdTransform(t.grid_spacing, x.reshape(t.coeffs.shape), t.extent)
        f, _, terms = obj(x, grad=False)
        warn |= not info["converged"]
        reports.append({"level": lvl, "grid_spacing_mm": t.grid_spacing, "iterations": info["iterations"],
                        "converged": info["converged"], "energy": f, "terms": terms})
    res = FfdResult(t)
    final = reports[-1]
    resid = []
    if lms[0] is not None:
        from .deformation import ffd_apply

        ok = (lms[0][:, 0] >= 0) & (lms[0][:, 0] <= extent[0]) & (lms[0][:, 1] >= 0) & (lms[0][:, 1] <= extent[1])
        if ok.any():
            resid = np.linalg.norm(ffd_apply(t, lms[0][ok]) - lms[1][ok], axis=1).tolist()
    res.report = {
        "data_term": cfg.data_term,
        "energy": final["energy"],
        "terms": final["terms"],
        "iterations": sum(r["iterations"] for r in reports),
        "levels": reports,
        "landmark_residuals_mm": resid,
        "warning": "iteration budget exhausted before convergence" if warn else None,
    }
    if warn:
        log.debug("FFD optimisation hit the iteration budget on at least one level")
    return res


def optimize_ffd(ref: Image2D, prediction: SynthesisPrediction, landmarks: LandmarkSet | None,
                 cfg: RegistrationEnergyConfig | None = None, init: FfdTransform | None = None) -> FfdResult:
    """Fit a B-spline FFD so that ref(V(x)) matches the predicted mean, weighted by 1 / variance."""
    cfg = cfg or RegistrationEnergyConfig()
    if prediction.mean.shape != ref.shape:
        raise ValueError("prediction grid does not match the reference image")
    return _run_pyramid(ref, cfg, landmarks, mean=prediction.mean, var=prediction.var, init=init)


def optimize_ffd_mi(ref: Image2D, flo: Image2D, landmarks: LandmarkSet | None,
                    cfg: RegistrationEnergyConfig | None = None, init: FfdTransform | None = None) -> FfdResult:
    """Mutual-information FFD baseline: maximize MI[ref(V(x)), flo(x)] with the same regularizers."""
    cfg = cfg or RegistrationEnergyConfig(data_term="mutual-information")
    if flo.shape != ref.shape:
        raise ValueError("images must share a grid")
    return _run_pyramid(ref, cfg, landmarks, fixed=flo.data, init=init)


def level_objective(ref: Image2D, cfg: RegistrationEnergyConfig, t: FfdTransform, landmarks=None,
                    prediction: SynthesisPrediction | None = None, flo: Image2D | None = None):
    """Single-level objective callable ``f(cflat, grad=True) -> (f, g, terms)`` (for diagnostics and tests)."""
    lms = _landmark_mm(landmarks, ref.spacing)
    if prediction is not None:
        return _LevelObjective(t, ref.data, ref.spacing, cfg, lms, prediction.mean, prediction.var)
    return _LevelObjective(t, ref.data, ref.spacing, cfg, lms, fixed=flo.data)
