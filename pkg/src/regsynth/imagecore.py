"""Raster images, interpolation, Gaussian-derivative features and Harris response.

Coordinates follow the (x, y) = (column, row) convention throughout; pixel
``(x, y)`` lives at ``data[y, x]``. Physical positions are ``pixel * spacing``
in millimetres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Image2D:
    """Scalar raster with isotropic physical spacing (mm / pixel)."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"image data must be 2D, got shape {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise ValueError("image must be at least 2x2")
        if not np.all(np.isfinite(data)):
            raise ValueError("image data contains non-finite values")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data) -> "Image2D":
        return Image2D(data, self.spacing)


def bilinear_sample(img, x, y):
    """Bilinear interpolation at continuous pixel coordinates.

    ``img`` may be an :class:`Image2D` or a bare 2D array. Coordinates outside
    the grid are clamped to the edge. Scalars in, scalar out.
    """
    data = img.data if isinstance(img, Image2D) else np.asarray(img, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite sampling coordinate")
    h, w = data.shape
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    fx = xc - x0
    fy = yc - y0
    v00 = data[y0, x0]
    v01 = data[y0, x0 + 1]
    v10 = data[y0 + 1, x0]
    v11 = data[y0 + 1, x0 + 1]
    out = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy
    if out.ndim == 0:
        return float(out)
    return out


def bilinear_sample_grad(data, x, y):
    """Value and analytic (x, y) derivative of the bilinear interpolant.

    Derivatives are per pixel and vanish where the coordinate is clamped.
    """
    h, w = data.shape
    inside_x = (x >= 0) & (x <= w - 1)
    inside_y = (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    fx = xc - x0
    fy = yc - y0
    v00 = data[y0, x0]
    v01 = data[y0, x0 + 1]
    v10 = data[y0 + 1, x0]
    v11 = data[y0 + 1, x0 + 1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    val = top * (1 - fy) + bot * fy
    gx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * inside_x
    gy = (bot - top) * inside_y
    return val, gx, gy


def gaussian_kernel(sigma_px: float) -> np.ndarray:
    """Sampled, normalized Gaussian truncated at 4 sigma."""
    radius = max(1, int(np.ceil(4.0 * sigma_px)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma_px) ** 2)
    return k / k.sum()


def gaussian_smooth(data: np.ndarray, sigma_px: float) -> np.ndarray:
    if sigma_px <= 0:
        return np.array(data, dtype=np.float64)
    k = gaussian_kernel(sigma_px)
    out = ndimage.correlate1d(np.asarray(data, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


_CENTRAL = np.array([-0.5, 0.0, 0.5])


def central_diff(data: np.ndarray, axis: int, spacing: float = 1.0) -> np.ndarray:
    """Central difference along ``axis`` (0 = y, 1 = x), clamp-to-edge."""
    return ndimage.correlate1d(data, _CENTRAL, axis=axis, mode="nearest") / spacing


@dataclass(frozen=True)
class FeatureStack:
    """Per-pixel feature vectors, shape (height, width, n_features)."""

    values: np.ndarray
    scales: tuple
    max_order: int
    names: tuple = ()

    @property
    def n_features(self) -> int:
        return self.values.shape[-1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[-1])


def feature_count(n_scales: int, max_order: int) -> int:
    return sum(k + 1 for k in range(max_order + 1)) * n_scales + 2


def gaussian_derivative_features(img: Image2D, scales=(0.0, 2.0, 4.0), max_order: int = 3) -> FeatureStack:
    """Multi-scale Gaussian derivatives plus normalized location.

    For every scale (mm) the image is smoothed (no smoothing at scale 0) and
    all mixed derivatives d^i/dx^i d^j/dy^j with i + j <= max_order are taken
    by repeated central differences, in mm units.
    """
    if max_order < 0 or max_order > 3:
        raise ValueError("max_order must be in [0, 3]")
    scales = tuple(float(s) for s in scales)
    extent = max(img.width, img.height) * img.spacing
    for s in scales:
        if s < 0:
            raise ValueError("scales must be non-negative")
        if s > extent:
            raise ValueError(f"scale {s} mm exceeds the image extent {extent} mm")

    feats = []
    names = []
    for s in scales:
        base = gaussian_smooth(img.data, s / img.spacing)
        # dx_cache[i] = d^i/dx^i of the smoothed image
        dx_cache = [base]
        for _ in range(max_order):
            dx_cache.append(central_diff(dx_cache[-1], 1, img.spacing))
        for order in range(max_order + 1):
            for i in range(order, -1, -1):
                j = order - i
                f = dx_cache[i]
                for _ in range(j):
                    f = central_diff(f, 0, img.spacing)
                feats.append(f)
                names.append(f"s{s:g}_dx{i}dy{j}")
    yy, xx = np.mgrid[0 : img.height, 0 : img.width].astype(np.float64)
    feats.append(xx / (img.width - 1))
    feats.append(yy / (img.height - 1))
    names += ["loc_x", "loc_y"]
    return FeatureStack(np.stack(feats, axis=-1), scales, max_order, tuple(names))


def harris_response(img: Image2D, k: float = 0.04, integration_sigma: float = 2.0) -> Image2D:
    """Harris corner measure det(A) - k trace(A)^2 of the smoothed structure tensor."""
    if not 0 < k <= 0.25:
        raise ValueError("k must be in (0, 0.25]")
    if not integration_sigma > 0:
        raise ValueError("integration_sigma must be positive")
    gx = central_diff(img.data, 1)
    gy = central_diff(img.data, 0)
    sig = integration_sigma / img.spacing
    axx = gaussian_smooth(gx * gx, sig)
    ayy = gaussian_smooth(gy * gy, sig)
    axy = gaussian_smooth(gx * gy, sig)
    resp = axx * ayy - axy * axy - k * (axx + ayy) ** 2
    return Image2D(resp, img.spacing)


# --- I/O --------------------------------------------------------------------


def _to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(data), 0, 255).astype(np.uint8)


def write_sidecar(path, spacing: float) -> None:
    Path(str(path) + ".json").write_text(json.dumps({"spacing_mm": float(spacing)}))


def read_sidecar(path) -> float:
    side = Path(str(path) + ".json")
    if side.exists():
        return float(json.loads(side.read_text())["spacing_mm"])
    return 1.0


def write_pgm(path, img: Image2D) -> None:
    arr = _to_uint8(img.data)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
    write_sidecar(path, img.spacing)


def read_pgm(path) -> Image2D:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("only 8-bit PGM supported")
    pos += 1
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return Image2D(data.astype(np.float64), read_sidecar(path))


def write_png(path, img: Image2D) -> None:
    from PIL import Image

    Image.fromarray(_to_uint8(img.data), mode="L").save(path)
    write_sidecar(path, img.spacing)


def read_png(path) -> Image2D:
    from PIL import Image

    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64)
    return Image2D(data, read_sidecar(path))


def read_image(path) -> Image2D:
    if str(path).lower().endswith(".pgm"):
        return read_pgm(path)
    return read_png(path)


def write_image(path, img: Image2D) -> None:
    if str(path).lower().endswith(".pgm"):
        write_pgm(path, img)
    else:
        write_png(path, img)


def write_raster(path, data: np.ndarray, spacing: float) -> None:
    """Real-valued raster as little-endian float32 raw plus a JSON sidecar."""
    arr = np.asarray(data, dtype="<f4")
    arr.tofile(path)
    Path(str(path) + ".json").write_text(
        json.dumps({"width": int(arr.shape[1]), "height": int(arr.shape[0]), "spacing_mm": float(spacing)})
    )


def read_raster(path) -> Image2D:
    meta = json.loads(Path(str(path) + ".json").read_text())
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != h * w:
        raise ValueError(f"{path}: expected {h * w} floats, found {raw.size}")
    return Image2D(raw.reshape(h, w).astype(np.float64), float(meta["spacing_mm"]))
