"""Synthetic two-modality benchmark with ground-truth deformations and landmarks."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .deformation import (
    DeformationField,
    VelocityField,
    _sample_field,
    default_squarings,
    integrate_velocity,
    min_jacobian_determinant,
    read_field,
    warp_image,
    write_field,
)
from .imagecore import Image2D, bilinear_sample, gaussian_smooth, harris_response, read_png, write_png
from .vem import LandmarkSet

log = logging.getLogger(__name__)

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3

# Class means per modality; the orderings differ so the mapping is non-monotonic.
MODALITY_A = {BACKGROUND: 5.0, CSF: 45.0, GM: 115.0, WM: 185.0}
MODALITY_B = {BACKGROUND: 15.0, CSF: 215.0, GM: 95.0, WM: 150.0}


@dataclass
class SynthConfig:
    sigma_v: float = 20.0
    smoothing_mm: float = 5.0
    rotation_deg: float = 2.0
    translation_px: float = 1.0
    log_scale: float = 0.1
    n_landmarks: int = 8
    suppression_frac: float = 0.1
    sigma_k: float = 0.5
    squarings: int | None = None
    size: int = 64
    spacing: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_v < 0:
            raise ValueError("sigma_v must be non-negative")
        if not self.smoothing_mm > 0:
            raise ValueError("smoothing must be positive")


@dataclass
class BenchmarkPair:
    reference: Image2D
    floating: Image2D
    truth: DeformationField
    landmarks: LandmarkSet
    mask: np.ndarray
    meta: dict = field(default_factory=dict)


def _smooth_noise(rng, shape, sigma_px):
    z = gaussian_smooth(rng.standard_normal(shape), sigma_px)
    return z / (z.std() + 1e-12)


def phantom_labels(size: int, seed: int) -> np.ndarray:
    """Brain-like label map: background, folded cortex over white matter, sulci, deep nuclei, ventricles."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    n = size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cx = (n - 1) / 2 + rng.normal(0, 0.02 * n)
    cy = (n - 1) / 2 + rng.normal(0, 0.02 * n)
    rx = n * rng.uniform(0.37, 0.42)
    ry = n * rng.uniform(0.40, 0.45)
    r = np.hypot((xx - cx) / rx, (yy - cy) / ry)
    rmin = min(rx, ry)
    # depth (pixels) below the outer surface
    depth = (1.0 - r) * rmin + 0.8 * _smooth_noise(rng, (n, n), n / 24)
    brain = depth > 0
    labels = np.zeros((n, n), np.int64)
    labels[brain] = WM
    # cortical ribbon with a strongly folded inner (grey/white) boundary
    gyri = _smooth_noise(rng, (n, n), n / 28)
    labels[brain & (depth < 0.09 * n * (1 + 0.6 * gyri))] = GM
    # sulci: thin CSF lines along zero crossings of a second field, within the cortex
    folds = _smooth_noise(rng, (n, n), n / 22)
    labels[brain & (depth < 0.11 * n) & (np.abs(folds) < 0.12)] = CSF
    labels[brain & (depth < 0.02 * n)] = CSF
    # deep grey nuclei, one per hemisphere
    for sgn in (-1, 1):
        d = np.hypot((xx - cx - sgn * 0.3 * rx) / (0.13 * n * rng.uniform(0.8, 1.2)),
                     (yy - cy - 0.1 * ry) / (0.10 * n * rng.uniform(0.8, 1.2)))
        labels[(d < 1) & (labels == WM)] = GM
    # lateral ventricles: two thin crescents near the midline
    for sgn in (-1, 1):
        v = np.hypot((xx - cx - sgn * 0.11 * rx) / (0.035 * n * rng.uniform(0.8, 1.3)),
                     (yy - cy + 0.12 * ry) / (0.14 * n * rng.uniform(0.8, 1.2)))
        labels[(v < 1) & brain] = CSF
    return labels


def _render(labels, means, rng, gamma, n):
    img = np.zeros(labels.shape)
    for c, m in means.items():
        pv = gaussian_smooth((labels == c).astype(np.float64), 0.7)
        texture = 1 + 0.06 * _smooth_noise(rng, labels.shape, n / 10)
        img += pv * m * texture
    img = 255.0 * (np.clip(img, 0, None) / 255.0) ** gamma
    img += rng.normal(0, 2.0, labels.shape)
    return gaussian_smooth(img, 0.5)


def generate_phantom_pair(size: int = 64, seed: int = 0, spacing: float = 1.0, return_labels: bool = False):
    """Two pixel-aligned renderings of one label map with different contrasts."""
    if size < 64:
        raise ValueError("phantom size must be >= 64")
    labels = phantom_labels(size, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 104729]))
    a = Image2D(_render(labels, MODALITY_A, rng, 0.9, size), spacing)
    b = Image2D(_render(labels, MODALITY_B, rng, 1.3, size), spacing)
    if return_labels:
        return a, b, labels
    return a, b


def boundary_window(shape, spacing) -> np.ndarray:
    """1 - exp(-0.01 D^2), D the distance to the image border in mm."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.minimum.reduce([xx, w - 1 - xx, yy, h - 1 - yy]) * spacing
    return 1.0 - np.exp(-0.01 * d**2)


def sample_velocity(shape, cfg: SynthConfig, rng) -> VelocityField:
    noise = rng.normal(0.0, cfg.sigma_v, (2,) + tuple(shape)) if cfg.sigma_v > 0 else np.zeros((2,) + tuple(shape))
    sig = cfg.smoothing_mm / cfg.spacing
    vel = np.stack([gaussian_smooth(noise[0], sig), gaussian_smooth(noise[1], sig)])
    return VelocityField(vel * boundary_window(shape, cfg.spacing), cfg.spacing)


def similarity_points(x, y, shape, angle_rad, scale, tx, ty):
    h, w = shape
    cx, cy = (w - 1) / 2, (h - 1) / 2
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    dx, dy = x - cx, y - cy
    return cx + scale * (c * dx - s * dy) + tx, cy + scale * (s * dx + c * dy) + ty


@dataclass
class DeformationSample:
    field: DeformationField
    nonlinear: DeformationField
    velocity: VelocityField
    similarity: dict


def sample_deformation_parts(size, cfg: SynthConfig, seed: int) -> DeformationSample:
    shape = (size, size) if np.isscalar(size) else tuple(size)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 15485863]))
    vel = sample_velocity(shape, cfg, rng)
    squarings = cfg.squarings if cfg.squarings is not None else default_squarings(vel)
    nonlin = integrate_velocity(vel, squarings)
    angle = rng.normal(0, np.deg2rad(cfg.rotation_deg)) if cfg.rotation_deg > 0 else 0.0
    tx, ty = (rng.normal(0, cfg.translation_px, 2) if cfg.translation_px > 0 else (0.0, 0.0))
    scale = float(np.exp(rng.normal(0, cfg.log_scale))) if cfg.log_scale > 0 else 1.0
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = similarity_points(xx, yy, shape, angle, scale, tx, ty)
    # x -> S(x) -> S(x) + v(S(x)): similarity first, then the nonlinear flow
    v = _sample_field(nonlin.in_pixels(), sx, sy)
    disp = np.stack([sx + v[0] - xx, sy + v[1] - yy]) * cfg.spacing
    sim = {"angle_deg": float(np.rad2deg(angle)), "scale": scale, "tx_px": float(tx), "ty_px": float(ty),
           "order": "nonlinear_after_similarity", "squarings": int(squarings)}
    return DeformationSample(DeformationField(disp, cfg.spacing), nonlin, vel, sim)


def sample_deformation(size, cfg: SynthConfig, seed: int) -> DeformationField:
    """Random diffeomorphic flow composed with a random similarity."""
    return sample_deformation_parts(size, cfg, seed).field


def place_landmarks(img: Image2D, n_landmarks: int, suppression_sigma=None, seed: int = 0, k: float = 0.04,
                    integration_sigma: float = 2.0) -> np.ndarray:
    """Greedy Harris maxima with complementary-Gaussian suppression; (n, 2) integer (x, y)."""
    if n_landmarks < 0 or n_landmarks > img.data.size:
        raise ValueError("invalid landmark count")
    resp = harris_response(img, k, integration_sigma).data.copy()
    h, w = img.shape
    if suppression_sigma is None:
        sx, sy = w / 10.0, h / 10.0
    else:
        sx = sy = float(suppression_sigma)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(n_landmarks):
        top = np.flatnonzero(resp.ravel() == resp.max())
        i = int(top[0] if top.size == 1 else rng.choice(top))
        y0, x0 = divmod(i, w)
        pts.append((x0, y0))
        resp *= 1.0 - np.exp(-0.5 * (((xx - x0) / sx) ** 2 + ((yy - y0) / sy) ** 2))
    return np.asarray(pts, dtype=np.int64).reshape(-1, 2)


def project_landmarks(points, field: DeformationField, sigma_k: float, seed: int = 0) -> LandmarkSet:
    """Push points through a point-mapping field and add isotropic noise (std ``sigma_k`` mm).

    Points whose image falls outside the domain are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 32452843]))
    u = field.in_pixels()
    moved = np.stack([pts[:, 0] + bilinear_sample(u[0], pts[:, 0], pts[:, 1]),
                      pts[:, 1] + bilinear_sample(u[1], pts[:, 0], pts[:, 1])], axis=1).reshape(-1, 2)
    if sigma_k > 0:
        moved = moved + rng.normal(0, sigma_k, moved.shape) / field.spacing
    h, w = field.shape
    ok = (moved[:, 0] >= 0) & (moved[:, 0] <= w - 1) & (moved[:, 1] >= 0) & (moved[:, 1] <= h - 1)
    if not ok.all():
        log.info("dropped %d landmark(s) projected outside the domain", int((~ok).sum()))
    return LandmarkSet(pts[ok], moved[ok], sigma_k if sigma_k > 0 else 0.5)


def invert_field(field: DeformationField, iterations: int = 100) -> DeformationField:
    """Dense inverse by fixed-point iteration: y = x - U(y)."""
    u = field.in_pixels()
    h, w = field.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    inv = -u.copy()
    for _ in range(iterations):
        new = -_sample_field(u, xx + inv[0], yy + inv[1])
        if np.abs(new - inv).max() < 1e-10:
            inv = new
            break
        inv = new
    return DeformationField(inv * field.spacing, field.spacing)


def quantize_8bit(img: Image2D) -> Image2D:
    lo, hi = float(img.data.min()), float(img.data.max())
    if hi <= lo:
        log.warning("constant image quantized to zeros")
        return img.with_data(np.zeros(img.shape))
    return img.with_data(np.rint((img.data - lo) / (hi - lo) * 255.0))


def generate_pair(cfg: SynthConfig, index: int = 0) -> BenchmarkPair:
    seed = int(np.random.SeedSequence([int(cfg.seed), int(index)]).generate_state(1)[0])
    a, b, labels = generate_phantom_pair(cfg.size, seed, cfg.spacing, return_labels=True)
    parts = sample_deformation_parts(cfg.size, cfg, seed)
    truth = parts.field
    floating = quantize_8bit(warp_image(b, truth))
    reference = quantize_8bit(a)
    u = truth.in_pixels()
    yy, xx = np.mgrid[0 : cfg.size, 0 : cfg.size].astype(np.float64)
    lx = np.clip(np.rint(xx + u[0]), 0, cfg.size - 1).astype(int)
    ly = np.clip(np.rint(yy + u[1]), 0, cfg.size - 1).astype(int)
    mask = labels[ly, lx] != BACKGROUND
    pts = place_landmarks(reference, cfg.n_landmarks, seed=seed)
    landmarks = project_landmarks(pts, invert_field(truth), cfg.sigma_k, seed)
    meta = {"index": index, "seed": seed, "config": asdict(cfg), "similarity": parts.similarity,
            "min_jacobian_nonlinear": min_jacobian_determinant(parts.nonlinear)}
    return BenchmarkPair(reference, floating, truth, landmarks, mask, meta)


# --- dataset directory -------------------------------------------------------------


def write_landmarks_csv(path, lm: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "kx_px", "ky_px", "khx_px", "khy_px"])
        for i, (k, kh) in enumerate(zip(lm.k, lm.kh)):
            wr.writerow([i, int(k[0]), int(k[1]), repr(float(kh[0])), repr(float(kh[1]))])


def read_landmarks_csv(path, sigma_k: float = 0.5) -> LandmarkSet:
    k, kh = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            k.append((float(row["kx_px"]), float(row["ky_px"])))
            kh.append((float(row["khx_px"]), float(row["khy_px"])))
    return LandmarkSet(np.asarray(k).reshape(-1, 2), np.asarray(kh).reshape(-1, 2), sigma_k)


def write_pair(directory, pair: BenchmarkPair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png(d / "ref.png", pair.reference)
    write_png(d / "float.png", pair.floating)
    write_png(d / "mask.png", Image2D(pair.mask.astype(np.float64) * 255, pair.reference.spacing))
    write_field(d / "truth_field.raw", pair.truth)
    write_landmarks_csv(d / "landmarks.csv", pair.landmarks)
    (d / "meta.json").write_text(json.dumps(pair.meta, indent=2, sort_keys=True))


def read_pair(directory) -> BenchmarkPair:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    sigma_k = float(meta.get("config", {}).get("sigma_k", 0.5)) or 0.5
    mask_path = d / "mask.png"
    ref = read_png(d / "ref.png")
    mask = read_png(mask_path).data > 127 if mask_path.exists() else np.ones(ref.shape, bool)
    return BenchmarkPair(ref, read_png(d / "float.png"), read_field(d / "truth_field.raw"),
                         read_landmarks_csv(d / "landmarks.csv", sigma_k), mask, meta)


def generate_dataset(out_dir, n_pairs: int, cfg: SynthConfig) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_pairs):
        p = out / f"pair_{i}"
        write_pair(p, generate_pair(cfg, i))
        paths.append(p)
    (out / "dataset.json").write_text(json.dumps({"n_pairs": n_pairs, "config": asdict(cfg)}, indent=2, sort_keys=True))
    return paths
