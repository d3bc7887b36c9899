"""Dense image primitives shared by the rest of the package.

Images are planar ``(C, H, W)`` float arrays.  The :class:`Image` record adds a
colour-space tag and validation; most numeric routines accept bare arrays so
they compose with numpy code without wrapping and unwrapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage

from . import kernels

COLOR_SPACES = ("linear", "srgb", "data")

#: Sentinel PSNR for identical images, keeps metric tables total.
PSNR_INF = float("inf")


@dataclass(frozen=True)
class Image:
    """A planar float32 image with a colour-space tag."""

    data: np.ndarray
    color_space: str = "linear"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise ValueError(f"expected a (C, H, W) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if self.color_space not in COLOR_SPACES:
            raise ValueError(f"unknown colour space {self.color_space!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


ArrayLike = Union[np.ndarray, Image]


def as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Image):
        return x.data
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


class Rng:
    """Seeded random stream (PCG64; the bit stream is platform independent).

    Single owner: pass it down explicitly, never share between threads.
    """

    def __init__(self, seed: int = 42):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def spawn_seed(self) -> int:
        """Draw a 63-bit seed for a child stream."""
        return int(self._gen.integers(0, 2**63 - 1))

    def child(self) -> "Rng":
        return Rng(self.spawn_seed())


def grid_sample(src: ArrayLike, uv: ArrayLike) -> np.ndarray:
    """Bilinear lookup of ``src`` at normalised coordinates ``uv``.

    ``uv`` is ``(2, H', W')`` with values in [-1, 1] (align-corners off: -1 is
    the left/top edge, +1 the right/bottom edge).  The horizontal axis wraps,
    the vertical axis clamps.  Returns ``(C, H', W')`` float64.
    """
    src = as_array(src)
    uv = as_array(uv)
    if src.size == 0:
        raise ValueError("grid_sample on an empty source image")
    if uv.shape[0] != 2:
        raise ValueError(f"uv must have 2 channels, got {uv.shape[0]}")
    if not np.all(np.isfinite(uv)):
        raise ValueError("uv contains non-finite coordinates")
    _, h, w = src.shape
    out_shape = uv.shape[1:]
    x = ((uv[0].astype(np.float64).ravel() + 1.0) * w - 1.0) * 0.5
    y = ((uv[1].astype(np.float64).ravel() + 1.0) * h - 1.0) * 0.5
    out = kernels.bilinear_wrap(np.ascontiguousarray(src, dtype=np.float64), x, y)
    return out.reshape((src.shape[0],) + out_shape)


def downsample_area(src: ArrayLike, factor: int) -> np.ndarray:
    """Mean over non-overlapping ``factor x factor`` blocks."""
    src = as_array(src)
    c, h, w = src.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"{h}x{w} image is not divisible by factor {factor}")
    blocks = src.reshape(c, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(2, 4))


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: ArrayLike, b: ArrayLike) -> float:
    a, b = as_array(a), as_array(b)
    _check_same_shape(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a: ArrayLike, b: ArrayLike, peak: float = 1.0) -> float:
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / err)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[..., :, i:w - k + 1 + i] for i in range(k))


def ssim(a: ArrayLike, b: ArrayLike, peak: float = 1.0) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Images smaller than the window fall back to a window of their own size.
    """
    a, b = as_array(a).astype(np.float64), as_array(b).astype(np.float64)
    _check_same_shape(a, b)
    if np.array_equal(a, b):
        return 1.0
    size = min(11, a.shape[1], a.shape[2])
    g = _gaussian_window(size, 1.5)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def encode_normals(n: np.ndarray) -> np.ndarray:
    """Unit vectors in [-1, 1] to storage values in [0, 1]."""
    return (np.asarray(n) + 1.0) * 0.5


def decode_normals(x: np.ndarray, renormalize: bool = False) -> np.ndarray:
    n = np.asarray(x, dtype=np.float64) * 2.0 - 1.0
    if renormalize:
        norm = np.linalg.norm(n, axis=0, keepdims=True)
        n = n / np.maximum(norm, 1e-8)
    return n


# ---------------------------------------------------------------------------
# file formats


def write_pfm(path, img: ArrayLike):
    """Little-endian PFM (scale -1.0).  1 or 3 channels; rows stored bottom-up."""
    arr = as_array(img).astype("<f4")
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ValueError(f"PFM holds 1 or 3 channels, got {c}")
    header = ("PF" if c == 3 else "Pf") + f"\n{w} {h}\n-1.0\n"
    body = np.ascontiguousarray(np.transpose(arr, (1, 2, 0))[::-1])
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(body.tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        raw = f.read()
    c = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * c * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w, c)[::-1]
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1))).astype(np.float32)


def srgb_encode(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def quantize8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: ArrayLike, srgb: bool = False):
    """8-bit PNG; values clamped to [0, 1].  ``srgb`` applies the transfer curve."""
    arr = as_array(img).astype(np.float64)
    if srgb:
        arr = srgb_encode(arr)
    q = quantize8(arr)
    c = q.shape[0]
    if c == 1:
        pil = PILImage.fromarray(q[0], mode="L")
    elif c == 3:
        pil = PILImage.fromarray(np.transpose(q, (1, 2, 0)), mode="RGB")
    elif c == 4:
        pil = PILImage.fromarray(np.transpose(q, (1, 2, 0)), mode="RGBA")
    else:
        raise ValueError(f"PNG holds 1, 3 or 4 channels, got {c}")
    # fixed compression keeps output bytes reproducible
    pil.save(path, format="PNG", compress_level=6)


def read_png(path, srgb: bool = False) -> np.ndarray:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil, dtype=np.float32) / 255.0
    arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
    if srgb:
        arr = srgb_decode(arr).astype(np.float32)
    return np.ascontiguousarray(arr)
