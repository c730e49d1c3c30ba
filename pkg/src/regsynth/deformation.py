"""Dense displacement fields, scaling-and-squaring, cubic B-spline FFDs and their regularizers.

Vector fields are stored as arrays of shape (2, height, width) holding the
x and y components in millimetres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .imagecore import Image2D, bilinear_sample


@dataclass(frozen=True)
class _VectorField:
    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != 2:
            raise ValueError(f"vector field must have shape (2, H, W), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("vector field contains non-finite values")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def zeros(cls, shape, spacing=1.0):
        return cls(np.zeros((2,) + tuple(shape)), spacing)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def in_pixels(self) -> np.ndarray:
        return self.data / self.spacing


class DeformationField(_VectorField):
    """Per-pixel displacement U(x) in mm; a point x maps to x + U(x)."""


class VelocityField(_VectorField):
    """Stationary velocity field in mm (per unit time)."""


def _sample_field(field_px: np.ndarray, x, y) -> np.ndarray:
    return np.stack([bilinear_sample(field_px[0], x, y), bilinear_sample(field_px[1], x, y)])


def _spline_coeffs(field_px: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.spline_filter(c, order=3, mode="nearest") for c in field_px])


@numba.njit(cache=True)
def _cubic_at(c, x, y):
    # clamped coefficient indices reproduce scipy's "nearest" extension
    h, w = c.shape
    ix = int(np.floor(x))
    iy = int(np.floor(y))
    u = x - ix
    v = y - iy
    wx = ((1 - u) ** 3 / 6, (3 * u**3 - 6 * u**2 + 4) / 6, (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6, u**3 / 6)
    wy = ((1 - v) ** 3 / 6, (3 * v**3 - 6 * v**2 + 4) / 6, (-3 * v**3 + 3 * v**2 + 3 * v + 1) / 6, v**3 / 6)
    out = 0.0
    for a in range(4):
        r = min(max(iy + a - 1, 0), h - 1)
        row = 0.0
        for b in range(4):
            row += wx[b] * c[r, min(max(ix + b - 1, 0), w - 1)]
        out += wy[a] * row
    return out


@numba.njit(cache=True)
def _spline_sample_kernel(cx, cy, x, y, out):
    for i in range(x.size):
        out[0, i] = _cubic_at(cx, x[i], y[i])
        out[1, i] = _cubic_at(cy, x[i], y[i])


def _spline_sample(coeffs: np.ndarray, x, y) -> np.ndarray:
    """Cubic B-spline interpolation of both components from prefiltered coefficients."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty((2, x.size))
    _spline_sample_kernel(coeffs[0], coeffs[1], x.ravel(), y.ravel(), out)
    return out.reshape((2,) + x.shape)


@numba.njit(cache=True)
def _euler_kernel(cx, cy, steps):
    h, w = cx.shape
    out = np.empty((2, h, w))
    dt = 1.0 / steps
    for r in range(h):
        for q in range(w):
            px = float(q)
            py = float(r)
            for _ in range(steps):
                dx = _cubic_at(cx, px, py)
                dy = _cubic_at(cy, px, py)
                px += dt * dx
                py += dt * dy
            out[0, r, q] = px - q
            out[1, r, q] = py - r
    return out


def warp_image(img: Image2D, field: DeformationField) -> Image2D:
    """Resample ``img`` at x + U(x): output(x) = img(x + U(x))."""
    if img.shape != field.shape:
        raise ValueError(f"field shape {field.shape} does not match image shape {img.shape}")
    yy, xx = np.mgrid[0 : img.height, 0 : img.width].astype(np.float64)
    u = field.data / img.spacing
    return Image2D(bilinear_sample(img, xx + u[0], yy + u[1]), img.spacing)


def compose_fields(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Displacement (pixels) of x -> y + second(y), y = x + first(x).

    ``second`` is interpolated with cubic B-splines: repeated squaring amplifies
    the curvature error that bilinear interpolation would leave behind.
    """
    _, h, w = first.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return first + _spline_sample(_spline_coeffs(second), xx + first[0], yy + first[1])


def default_squarings(vel: VelocityField, target_px: float = 1.0 / 64) -> int:
    vmax = float(np.max(np.hypot(*vel.in_pixels()))) if vel.data.size else 0.0
    if vmax <= target_px:
        return 0
    return int(np.ceil(np.log2(vmax / target_px)))


def integrate_velocity(vel: VelocityField, squarings: int | None = None) -> DeformationField:
    """Time-1 flow of a stationary velocity field by scaling and squaring."""
    if squarings is None:
        squarings = default_squarings(vel)
    if squarings < 0:
        raise ValueError("squarings must be non-negative")
    u = vel.in_pixels() / (2.0**squarings)
    for _ in range(squarings):
        u = compose_fields(u, u)
    return DeformationField(u * vel.spacing, vel.spacing)


def euler_flow(vel: VelocityField, steps: int = 4096) -> DeformationField:
    """Explicit Euler integration of the stationary flow, one trajectory per pixel.

    The velocity is interpolated like in :func:`compose_fields`, so the two
    integrators approximate the same continuous flow.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    c = _spline_coeffs(vel.in_pixels())
    return DeformationField(_euler_kernel(c[0], c[1], int(steps)) * vel.spacing, vel.spacing)


def jacobian_determinant(field: DeformationField) -> np.ndarray:
    """det(I + grad u) on interior pixels, central differences."""
    u = field.in_pixels()
    ux = (u[0][1:-1, 2:] - u[0][1:-1, :-2]) / 2
    uy = (u[0][2:, 1:-1] - u[0][:-2, 1:-1]) / 2
    vx = (u[1][1:-1, 2:] - u[1][1:-1, :-2]) / 2
    vy = (u[1][2:, 1:-1] - u[1][:-2, 1:-1]) / 2
    return (1 + ux) * (1 + vy) - uy * vx


def min_jacobian_determinant(field: DeformationField) -> float:
    if min(field.shape) < 3:
        raise ValueError("field needs at least 3 pixels per axis")
    return float(jacobian_determinant(field).min())


# --- cubic B-spline free-form deformation ----------------------------------


def bspline_weights(u: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Cubic B-spline basis (or derivative) weights, shape (4, len(u))."""
    u = np.asarray(u, dtype=np.float64)
    if deriv == 0:
        return np.stack(
            [
                (1 - u) ** 3 / 6,
                (3 * u**3 - 6 * u**2 + 4) / 6,
                (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6,
                u**3 / 6,
            ]
        )
    if deriv == 1:
        return np.stack(
            [
                -((1 - u) ** 2) / 2,
                (9 * u**2 - 12 * u) / 6,
                (-9 * u**2 + 6 * u + 3) / 6,
                u**2 / 2,
            ]
        )
    if deriv == 2:
        return np.stack([1 - u, 3 * u - 2, -3 * u + 1, u])
    raise ValueError("deriv must be 0, 1 or 2")


def grid_size(extent_mm: float, spacing_mm: float) -> int:
    return int(np.floor(extent_mm / spacing_mm + 1e-9)) + 4


@dataclass
class FfdTransform:
    """x' = x + sum_k B_k(x) psi_k over a regular control grid.

    Control point ``(i, j)`` sits at ``((j - 1) h, (i - 1) h)`` mm, so the grid
    covers ``[0, extent]`` with one basis-support margin on every side.
    """

    grid_spacing: float
    coeffs: np.ndarray  # (2, ny, nx), mm
    extent: tuple  # (ex, ey) in mm

    @classmethod
    def identity(cls, extent, grid_spacing):
        ex, ey = float(extent[0]), float(extent[1])
        nx, ny = grid_size(ex, grid_spacing), grid_size(ey, grid_spacing)
        return cls(float(grid_spacing), np.zeros((2, ny, nx)), (ex, ey))

    @classmethod
    def for_image(cls, img: Image2D, grid_spacing):
        return cls.identity(((img.width - 1) * img.spacing, (img.height - 1) * img.spacing), grid_spacing)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.coeffs.shape[1:]

    @property
    def n_params(self) -> int:
        return self.coeffs.size

    def control_positions(self):
        ny, nx = self.grid_shape
        h = self.grid_spacing
        return (np.arange(nx) - 1) * h, (np.arange(ny) - 1) * h

    def copy(self) -> "FfdTransform":
        return FfdTransform(self.grid_spacing, self.coeffs.copy(), self.extent)

    def to_json(self) -> dict:
        return {
            "format": "regsynth-ffd",
            "version": 1,
            "grid_spacing_mm": self.grid_spacing,
            "extent_mm": list(self.extent),
            "grid_shape": list(self.grid_shape),
            "coeffs_x": self.coeffs[0].tolist(),
            "coeffs_y": self.coeffs[1].tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FfdTransform":
        coeffs = np.stack([np.asarray(doc["coeffs_x"], float), np.asarray(doc["coeffs_y"], float)])
        return cls(float(doc["grid_spacing_mm"]), coeffs, tuple(doc["extent_mm"]))


def _axis_weights(pos, h, n, deriv):
    """Cell index and basis weights along one axis, validating the domain."""
    t = np.asarray(pos, dtype=np.float64) / h
    cell = np.floor(t).astype(np.intp)
    if np.any(cell < 0) or np.any(cell > n - 4):
        raise ValueError("point outside the FFD support")
    return cell, bspline_weights(t - cell, deriv) / h**deriv


def basis_matrix(t: FfdTransform, xs, ys, dx: int = 0, dy: int = 0) -> sp.csr_matrix:
    """Sparse (n_points, ny * nx) matrix of tensor-product basis values/derivatives."""
    ny, nx = t.grid_shape
    h = t.grid_spacing
    xs = np.ravel(xs)
    ys = np.ravel(ys)
    cx, wx = _axis_weights(xs, h, nx, dx)
    cy, wy = _axis_weights(ys, h, ny, dy)
    n = xs.size
    rows = np.repeat(np.arange(n), 16)
    cols = ((cy[:, None, None] + np.arange(4)[None, :, None]) * nx + cx[:, None, None] + np.arange(4)[None, None, :]).reshape(-1)
    vals = (wy.T[:, :, None] * wx.T[:, None, :]).reshape(-1)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, ny * nx))


def ffd_displacement(t: FfdTransform, pts_mm) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts_mm, dtype=np.float64))
    B = basis_matrix(t, pts[:, 0], pts[:, 1])
    c = t.coeffs.reshape(2, -1)
    return np.stack([B @ c[0], B @ c[1]], axis=1)


def ffd_apply(t: FfdTransform, pts_mm) -> np.ndarray:
    """Map mm points (N, 2) or a single (2,) point through the transform."""
    arr = np.asarray(pts_mm, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite point")
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    out = pts + ffd_displacement(t, pts)
    return out[0] if single else out


def ffd_jacobian(t: FfdTransform, pts_mm) -> np.ndarray:
    """Analytic Jacobian of the map, shape (N, 2, 2) with [i, j] = d x'_i / d x_j."""
    pts = np.atleast_2d(np.asarray(pts_mm, dtype=np.float64))
    c = t.coeffs.reshape(2, -1)
    Bx = basis_matrix(t, pts[:, 0], pts[:, 1], dx=1)
    By = basis_matrix(t, pts[:, 0], pts[:, 1], dy=1)
    J = np.empty((pts.shape[0], 2, 2))
    for i in range(2):
        J[:, i, 0] = Bx @ c[i] + (i == 0)
        J[:, i, 1] = By @ c[i] + (i == 1)
    return J


def pixel_grid_mm(shape, spacing):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx.ravel() * spacing, yy.ravel() * spacing


class FfdBasis:
    """Basis matrices of a transform geometry sampled on a pixel grid.

    The regularizer quadratic forms are cached here, since they only depend on
    the geometry.
    """

    def __init__(self, t: FfdTransform, shape, spacing):
        xs, ys = pixel_grid_mm(shape, spacing)
        self.shape = tuple(shape)
        self.spacing = float(spacing)
        self.n_pixels = xs.size
        self.B = basis_matrix(t, xs, ys)
        self.Bx = basis_matrix(t, xs, ys, dx=1)
        self.By = basis_matrix(t, xs, ys, dy=1)
        Bxx = basis_matrix(t, xs, ys, dx=2)
        Bxy = basis_matrix(t, xs, ys, dx=1, dy=1)
        Byy = basis_matrix(t, xs, ys, dy=2)
        n = self.n_pixels
        # Bending energy is a per-component quadratic form.
        self.Q_bend = ((Bxx.T @ Bxx) + 2 * (Bxy.T @ Bxy) + (Byy.T @ Byy)).tocsr() / n
        # Symmetric strain: u_x^2 + v_y^2 + (u_y + v_x)^2 / 2, coupled over both components.
        D = sp.bmat([[self.Bx, None], [None, self.By], [self.By / np.sqrt(2), self.Bx / np.sqrt(2)]]).tocsr()
        self.Q_lin = (D.T @ D).tocsr() / n


@lru_cache(maxsize=32)
def _cached_basis(grid_spacing, extent, grid_shape, shape, spacing):
    t = FfdTransform(grid_spacing, np.zeros((2,) + grid_shape), extent)
    return FfdBasis(t, shape, spacing)


def get_basis(t: FfdTransform, shape, spacing) -> FfdBasis:
    return _cached_basis(t.grid_spacing, tuple(t.extent), tuple(t.grid_shape), tuple(shape), float(spacing))


def regularizer_terms(t: FfdTransform, basis: FfdBasis, weights=(1.0, 1.0, 1.0), need_grad=True):
    """Weighted regularizer energy and gradient w.r.t. the flattened coeffs.

    Returns ``(energy, grad, (E_b, E_l, E_j))``; E_j is ``inf`` if the
    Jacobian determinant is non-positive at any sample.
    """
    wb, wl, wj = weights
    c = t.coeffs.reshape(2, -1)
    cflat = t.coeffs.reshape(-1)
    qb = [basis.Q_bend @ c[0], basis.Q_bend @ c[1]]
    e_b = float(c[0] @ qb[0] + c[1] @ qb[1])
    ql = basis.Q_lin @ cflat
    e_l = float(cflat @ ql)
    grad = np.zeros_like(cflat) if need_grad else None
    if need_grad:
        grad += wb * 2 * np.concatenate(qb) + wl * 2 * ql
    e_j = 0.0
    if wj != 0 or not need_grad:
        ux, uy = basis.Bx @ c[0], basis.By @ c[0]
        vx, vy = basis.Bx @ c[1], basis.By @ c[1]
        det = (1 + ux) * (1 + vy) - uy * vx
        if np.any(det <= 0):
            e_j = np.inf
        else:
            ld = np.log(det)
            e_j = float(np.mean(ld**2))
            if need_grad and wj != 0:
                g = 2 * ld / det / basis.n_pixels
                gx = basis.Bx.T @ (g * (1 + vy)) - basis.By.T @ (g * vx)
                gy = basis.By.T @ (g * (1 + ux)) - basis.Bx.T @ (g * uy)
                grad += wj * np.concatenate([gx, gy])
    energy = wb * e_b + wl * e_l + (wj * e_j if wj != 0 else 0.0)
    return energy, grad, (e_b, e_l, e_j)


def ffd_regularizers(t: FfdTransform, shape=None, spacing=1.0):
    """(bending, linear-elastic, log-Jacobian) energies, averaged over pixel samples.

    ``shape``/``spacing`` give the quadrature pixel grid; by default one sample
    per mm over the transform extent.
    """
    if shape is None:
        shape = (int(round(t.extent[1] / spacing)) + 1, int(round(t.extent[0] / spacing)) + 1)
    basis = get_basis(t, shape, spacing)
    _, _, terms = regularizer_terms(t, basis, need_grad=False)
    return terms


def ffd_to_field(t: FfdTransform, shape, spacing) -> DeformationField:
    basis = get_basis(t, shape, spacing)
    c = t.coeffs.reshape(2, -1)
    return DeformationField(np.stack([(basis.B @ c[0]).reshape(shape), (basis.B @ c[1]).reshape(shape)]), spacing)


def _refine_axis(c: np.ndarray, n_fine: int, axis: int) -> np.ndarray:
    c = np.moveaxis(c, axis, -1)
    out = np.zeros(c.shape[:-1] + (n_fine,))
    nc = c.shape[-1]
    for kf in range(n_fine):
        if kf % 2 == 1:
            k = (kf + 1) // 2
            out[..., kf] = (c[..., k - 1] + 6 * c[..., k] + c[..., min(k + 1, nc - 1)]) / 8
        else:
            k = kf // 2
            out[..., kf] = (c[..., k] + c[..., min(k + 1, nc - 1)]) / 2
    return np.moveaxis(out, -1, axis)


def refine_ffd(t: FfdTransform) -> FfdTransform:
    """Exact subdivision onto a grid of half the control spacing."""
    h = t.grid_spacing / 2
    nx, ny = grid_size(t.extent[0], h), grid_size(t.extent[1], h)
    c = _refine_axis(t.coeffs, nx, 2)
    c = _refine_axis(c, ny, 1)
    return FfdTransform(h, c, t.extent)


# --- I/O --------------------------------------------------------------------


def write_field(path, field: _VectorField) -> None:
    """Little-endian float32 raw: x components then y components, row-major."""
    np.asarray(field.data, dtype="<f4").tofile(path)
    Path(str(path) + ".json").write_text(
        json.dumps({"width": field.width, "height": field.height, "spacing_mm": field.spacing})
    )


def read_field(path) -> DeformationField:
    meta = json.loads(Path(str(path) + ".json").read_text())
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != 2 * h * w:
        raise ValueError(f"{path}: expected {2 * h * w} floats, found {raw.size}")
    return DeformationField(raw.reshape(2, h, w).astype(np.float64), float(meta["spacing_mm"]))


def write_ffd(path, t: FfdTransform) -> None:
    Path(path).write_text(json.dumps(t.to_json()))


def read_ffd(path) -> FfdTransform:
    return FfdTransform.from_json(json.loads(Path(path).read_text()))
