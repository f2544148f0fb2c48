"""Face preprocessing: 5-point similarity alignment, DoG filtering, cropping,
and PGM image I/O.

Images are 2-D float64 arrays indexed ``[row, col]``; landmark and transform
coordinates are ``(x, y) = (col, row)`` in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Fractions of the output size: eye-L, eye-R, nose base, mouth-L, mouth-R.
CANONICAL_LANDMARKS = np.array(
    [[0.30, 0.38], [0.70, 0.38], [0.50, 0.60], [0.35, 0.78], [0.65, 0.78]]
)


def canonical_landmarks(out_size: int) -> np.ndarray:
    return CANONICAL_LANDMARKS * out_size


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: float
    translation: tuple[float, float]

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        return np.array([[self.scale * c, -self.scale * s, tx], [self.scale * s, self.scale * c, ty]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        m = self.matrix
        return np.asarray(points, dtype=np.float64) @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "SimilarityTransform":
        inv_s = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx, ty = self.translation
        return SimilarityTransform(
            inv_s, -self.rotation, (-inv_s * (c * tx - s * ty), -inv_s * (s * tx + c * ty))
        )


def _check_landmarks(pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    if p.shape != (5, 2):
        raise ValueError(f"expected 5 (x, y) landmarks, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("landmarks must be finite")
    return p


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Least-squares scale + rotation + translation taking ``src`` to ``dst``.

    Closed form via complex arithmetic: with centered points ``a`` (src) and
    ``b`` (dst), the optimal ``s e^{i theta}`` is ``sum(conj(a) b) / sum(|a|^2)``.
    Reflections are excluded by construction.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"point sets must both be (n, 2), got {src.shape} and {dst.shape}")
    zs = src[:, 0] + 1j * src[:, 1]
    zd = dst[:, 0] + 1j * dst[:, 1]
    ms, md = zs.mean(), zd.mean()
    a, b = zs - ms, zd - md
    denom = float(np.sum(np.abs(a) ** 2))
    if denom <= 1e-12 * max(1.0, float(np.max(np.abs(zs)) ** 2)):
        raise ValueError("source landmarks are coincident; scale is undefined")
    q = np.sum(np.conj(a) * b) / denom
    t = md - q * ms
    return SimilarityTransform(float(abs(q)), float(np.angle(q)), (float(t.real), float(t.imag)))


def _bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = image.shape
    tol = 1e-9
    inside = (xs >= -tol) & (xs <= w - 1 + tol) & (ys >= -tol) & (ys <= h - 1 + tol)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(int), w - 1)
    y0 = np.minimum(np.floor(yc).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xc - x0, yc - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return np.where(inside, top * (1 - fy) + bot * fy, 0.0)


def warp(image: np.ndarray, xform: SimilarityTransform, out_h: int, out_w: int) -> np.ndarray:
    """Resample ``image`` so output pixel p shows input at ``xform^-1(p)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {out_h}x{out_w}")
    image = np.asarray(image, dtype=np.float64)
    inv = xform.inverse().matrix
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return _bilinear(image, sx, sy)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at +-3 sigma and renormalized to sum 1."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    # Symmetric padding keeps constants constant, so DoG removes DC exactly.
    p = np.pad(image, r, mode="symmetric")
    h, w = image.shape
    rows = np.zeros((h + 2 * r, w))
    for i, kv in enumerate(k):
        rows += kv * p[:, i : i + w]
    out = np.zeros((h, w))
    for i, kv in enumerate(k):
        out += kv * rows[i : i + h, :]
    return out


def dog_filter(image: np.ndarray, sigma1: float = 1.0, sigma2: float = 2.0) -> np.ndarray:
    if not (0 < sigma1 < sigma2):
        raise ValueError(f"need 0 < sigma1 < sigma2, got sigma1={sigma1}, sigma2={sigma2}")
    image = np.asarray(image, dtype=np.float64)
    return gaussian_blur(image, sigma1) - gaussian_blur(image, sigma2)


def crop_face(image: np.ndarray, landmarks, out_size: int) -> np.ndarray:
    """Align the five landmarks to the canonical template and crop."""
    lm = _check_landmarks(landmarks)
    xform = estimate_similarity(lm, canonical_landmarks(out_size))
    return warp(image, xform, out_size, out_size)


def standardize(image: np.ndarray) -> np.ndarray:
    mu = image.mean()
    sd = image.std()
    return (image - mu) / sd if sd > 1e-12 else image - mu


def preprocess(
    image: np.ndarray,
    landmarks,
    out_size: int = 64,
    sigma1: float = 1.0,
    sigma2: float = 2.0,
) -> np.ndarray:
    """Align and crop, DoG-filter, then standardize to zero mean, unit variance."""
    return standardize(dog_filter(crop_face(image, landmarks, out_size), sigma1, sigma2))


# ---------------------------------------------------------------- PGM I/O


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError(f"malformed PGM header: unexpected end of data at byte {start}")
    return buf[start:pos], pos


def read_image(path: str | Path) -> np.ndarray:
    """Read a binary (P5) PGM, 8- or 16-bit, scaled into [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"malformed PGM: expected magic 'P5' at byte 0, got {buf[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ValueError(f"malformed PGM header: non-integer {tok!r} near byte {start}") from None
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValueError(f"malformed PGM header: width={width} height={height} maxval={maxval}")
    pos += 1  # single whitespace before raster
    nbytes = width * height * (1 if maxval < 256 else 2)
    if len(buf) - pos < nbytes:
        raise ValueError(
            f"malformed PGM: raster truncated at byte {len(buf)}, expected {nbytes} bytes from byte {pos}"
        )
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    raw = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.float64) / maxval


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write an 8-bit P5 PGM; values are clipped to [0, 1] and rounded."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
