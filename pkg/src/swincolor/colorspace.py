"""sRGB <-> CIELAB conversion, image containers, and PNG I/O.

Conversions use the D65 reference white and run in double precision
internally; stored planes are float32.  The module also provides the
differentiable pieces needed to rebuild a gamma-encoded RGB tensor from
normalized Lab planes inside the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T

# D65 reference white in XYZ, Y normalized to 1.
WHITE_X = 0.95047
WHITE_Y = 1.0
WHITE_Z = 1.08883

# sRGB (linear) -> XYZ, IEC 61966-2-1 primaries with D65 white.
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=np.float64,
)

XYZ_TO_RGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ],
    dtype=np.float64,
)

# CIE constants: epsilon = (6/29)^3, kappa = (29/3)^3.
_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0

_GAMMA_KNEE = 0.0031308
_GAMMA_KNEE_ENC = 0.04045


@dataclass
class RgbImage:
    """8-bit sRGB image, pixels stored row-major as (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError(f"RgbImage pixels must be uint8, got {px.dtype}")
        if px.shape != (self.height, self.width, 3):
            raise ValueError(
                f"RgbImage pixels shape {px.shape} does not match "
                f"(height={self.height}, width={self.width}, 3)"
            )
        self.pixels = px

    @classmethod
    def from_array(cls, pixels):
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        h, w = pixels.shape[:2]
        return cls(width=w, height=h, pixels=pixels)


@dataclass
class LabImage:
    """CIELAB image as three float32 planes of shape (height, width)."""

    width: int
    height: int
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for name in ("L", "a", "b"):
            plane = np.asarray(getattr(self, name), dtype=np.float32)
            if plane.shape != (self.height, self.width):
                raise ValueError(
                    f"LabImage plane {name!r} has shape {plane.shape}, "
                    f"expected ({self.height}, {self.width})"
                )
            setattr(self, name, plane)


@dataclass
class NormalizedLab:
    """Network-ready Lab: lightness in [-1, 1], chroma planes in [-1, 1].

    ``lightness`` is (height, width); ``chroma`` stacks the scaled a and b
    planes as (2, height, width).  Planes are kept in double precision so the
    affine map round-trips exactly; batch assembly downcasts to float32.
    """

    width: int
    height: int
    lightness: np.ndarray
    chroma: np.ndarray

    def __post_init__(self):
        self.lightness = np.asarray(self.lightness, dtype=np.float64)
        self.chroma = np.asarray(self.chroma, dtype=np.float64)
        if self.lightness.shape != (self.height, self.width):
            raise ValueError(
                f"lightness shape {self.lightness.shape} does not match "
                f"({self.height}, {self.width})"
            )
        if self.chroma.shape != (2, self.height, self.width):
            raise ValueError(
                f"chroma shape {self.chroma.shape} does not match "
                f"(2, {self.height}, {self.width})"
            )


# -- scalar-array conversion core -------------------------------------------


def _srgb_decode(c):
    """Gamma-encoded [0,1] -> linear [0,1]."""
    return np.where(c <= _GAMMA_KNEE_ENC, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_encode(c):
    """Linear [0,1] -> gamma-encoded [0,1]."""
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= _GAMMA_KNEE, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _cie_f(t):
    return np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16.0) / 116.0)


def _cie_f_inv(u):
    cube = u ** 3
    return np.where(cube > _EPS, cube, (116.0 * u - 16.0) / _KAPPA)


def rgb_array_to_lab(pixels):
    """uint8 (H, W, 3) -> float32 Lab planes (3, H, W), computed in float64."""
    rgb = pixels.astype(np.float64) / 255.0
    lin = _srgb_decode(rgb)
    xyz = lin @ RGB_TO_XYZ.T
    fx = _cie_f(xyz[..., 0] / WHITE_X)
    fy = _cie_f(xyz[..., 1] / WHITE_Y)
    fz = _cie_f(xyz[..., 2] / WHITE_Z)
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L, a, b]).astype(np.float32)


def lab_array_to_rgb(planes):
    """float32 Lab planes (3, H, W) -> uint8 (H, W, 3), gamut-clipped."""
    L, a, b = (planes[i].astype(np.float64) for i in range(3))
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = np.stack(
        [_cie_f_inv(fx) * WHITE_X, _cie_f_inv(fy) * WHITE_Y, _cie_f_inv(fz) * WHITE_Z],
        axis=-1,
    )
    lin = xyz @ XYZ_TO_RGB.T
    rgb = _srgb_encode(lin)
    return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# -- dataclass API -----------------------------------------------------------


def srgb_to_lab(img: RgbImage) -> LabImage:
    planes = rgb_array_to_lab(img.pixels)
    return LabImage(width=img.width, height=img.height, L=planes[0], a=planes[1], b=planes[2])


def lab_to_srgb(img: LabImage) -> RgbImage:
    planes = np.stack([img.L, img.a, img.b])
    return RgbImage(width=img.width, height=img.height, pixels=lab_array_to_rgb(planes))


def normalize_lab(img: LabImage) -> NormalizedLab:
    """Map L in [0,100] to [-1,1] and a,b by 1/128 into roughly [-1,1]."""
    lightness = img.L.astype(np.float64) / 50.0 - 1.0
    chroma = np.stack([img.a, img.b]).astype(np.float64) / 128.0
    return NormalizedLab(width=img.width, height=img.height, lightness=lightness, chroma=chroma)


def denormalize_lab(n: NormalizedLab) -> LabImage:
    L = (n.lightness + 1.0) * 50.0
    ab = n.chroma * 128.0
    return LabImage(width=n.width, height=n.height, L=L, a=ab[0], b=ab[1])


def read_png(path) -> RgbImage:
    """Read an image file as 8-bit RGB; alpha, if present, is discarded."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return RgbImage.from_array(arr)


def write_png(img: RgbImage, path):
    Image.fromarray(img.pixels, mode="RGB").save(Path(path), format="PNG")


def resize_rgb(img: RgbImage, width: int, height: int) -> RgbImage:
    """Bilinear resample to (width, height)."""
    if img.width == width and img.height == height:
        return img
    with Image.fromarray(img.pixels, mode="RGB") as im:
        out = im.resize((width, height), Image.BILINEAR)
        return RgbImage.from_array(np.asarray(out, dtype=np.uint8))


# -- differentiable reconstruction ops ---------------------------------------
#
# The perceptual and color losses consume gamma-encoded RGB rebuilt from the
# network's normalized Lab output, so the rebuild has to run inside the
# autodiff graph.  Each piecewise map below supplies its analytic derivative;
# the gamut clip uses the usual zero-outside subgradient.


def lab_f_inverse_t(u: T.Tensor) -> T.Tensor:
    def fwd(x):
        cube = x * x * x
        return np.where(cube > _EPS, cube, (116.0 * x - 16.0) / _KAPPA).astype(x.dtype)

    def dfwd(x):
        cube = x * x * x
        return np.where(cube > _EPS, 3.0 * x * x, 116.0 / _KAPPA).astype(x.dtype)

    return T.elementwise(u, fwd, dfwd)


def srgb_encode_t(x: T.Tensor) -> T.Tensor:
    """Linear [0,1] -> gamma-encoded [0,1]; input must already be clipped."""

    def fwd(v):
        lo = np.maximum(v, 1e-12)  # keep the fractional power real
        return np.where(v <= _GAMMA_KNEE, 12.92 * v, 1.055 * lo ** (1.0 / 2.4) - 0.055).astype(
            v.dtype
        )

    def dfwd(v):
        lo = np.maximum(v, 1e-12)
        return np.where(v <= _GAMMA_KNEE, 12.92, (1.055 / 2.4) * lo ** (1.0 / 2.4 - 1.0)).astype(
            v.dtype
        )

    return T.elementwise(x, fwd, dfwd)


def clip01_t(x: T.Tensor) -> T.Tensor:
    def fwd(v):
        return np.clip(v, 0.0, 1.0)

    def dfwd(v):
        return ((v >= 0.0) & (v <= 1.0)).astype(v.dtype)

    return T.elementwise(x, fwd, dfwd)


_XYZ_TO_RGB_W = None


def _xyz_to_rgb_weight():
    global _XYZ_TO_RGB_W
    if _XYZ_TO_RGB_W is None:
        w = XYZ_TO_RGB.astype(np.float32).reshape(3, 3, 1, 1)
        _XYZ_TO_RGB_W = T.Tensor(w, requires_grad=False)
    return _XYZ_TO_RGB_W


def normalized_lab_to_rgb01(lightness: T.Tensor, chroma: T.Tensor) -> T.Tensor:
    """Rebuild gamma-encoded RGB in [0,1] from normalized Lab tensors.

    ``lightness`` is (N, 1, H, W), ``chroma`` is (N, 2, H, W); the result is
    (N, 3, H, W).  Differentiable end to end, with out-of-gamut values clipped.
    """
    if lightness.shape[1] != 1 or chroma.shape[1] != 2:
        raise ValueError(
            f"expected channel counts (1, 2), got "
            f"({lightness.shape[1]}, {chroma.shape[1]})"
        )
    L = (lightness + 1.0) * 50.0
    a = chroma[:, 0:1] * 128.0
    b = chroma[:, 1:2] * 128.0

    fy = (L + 16.0) * (1.0 / 116.0)
    fx = fy + a * (1.0 / 500.0)
    fz = fy - b * (1.0 / 200.0)

    x = lab_f_inverse_t(fx) * WHITE_X
    y = lab_f_inverse_t(fy)
    z = lab_f_inverse_t(fz) * WHITE_Z

    xyz = T.concat([x, y, z], axis=1)
    lin = T.conv2d(xyz, _xyz_to_rgb_weight(), stride=1, pad=0)
    return srgb_encode_t(clip01_t(lin))
