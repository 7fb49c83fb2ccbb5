"""Evaluation metrics: PSNR, SSIM, colorfulness, and colorfulness drift.

All metrics are pure functions of 8-bit sRGB images (``colorspace.RgbImage``
or plain uint8 ``(H, W, 3)`` arrays).  ``MetricReport`` collects per-image
rows and reduces them to corpus means, emitted as a CSV of rows plus a JSON
summary with exactly the five metric fields.
"""

import csv
import dataclasses
import json
import math

import numpy as np
from scipy.ndimage import correlate1d

from . import colorspace

PSNR_CAP_DB = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2

METRIC_FIELDS = (
    "psnr_db",
    "ssim",
    "colorfulness_pred",
    "colorfulness_gt",
    "delta_colorfulness",
)


def _pixels(img):
    if isinstance(img, colorspace.RgbImage):
        return img.pixels
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected a uint8 (H, W, 3) image, got {arr.dtype} {arr.shape}")
    return arr


def psnr(a, b):
    """Peak signal-to-noise ratio in dB over all RGB channels, capped at 99.

    10*log10(255^2 / MSE); identical images (zero MSE) report the cap.
    """
    pa = _pixels(a)
    pb = _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image size mismatch: {pa.shape} vs {pb.shape}")
    diff = pa.astype(np.float64) - pb.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0**2 / mse))


def _luma(pixels):
    p = pixels.astype(np.float64)
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


def _gaussian_taps():
    half = (_SSIM_WINDOW - 1) // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(offsets * offsets) / (2.0 * _SSIM_SIGMA**2))
    return g / g.sum()


def _window_mean(plane, taps):
    # Separable Gaussian, then slice away the border so only fully interior
    # windows contribute (equivalent to a valid-mode 2-D correlation).
    half = len(taps) // 2
    tmp = correlate1d(plane, taps, axis=0, mode="constant")
    out = correlate1d(tmp, taps, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a, b):
    """Single-scale SSIM on the Rec. 601 luma plane.

    11x11 Gaussian window (sigma 1.5), C1 = (0.01*255)^2, C2 = (0.03*255)^2,
    averaged over all fully interior window positions.
    """
    pa = _pixels(a)
    pb = _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image size mismatch: {pa.shape} vs {pb.shape}")
    if min(pa.shape[0], pa.shape[1]) < _SSIM_WINDOW:
        raise ValueError(
            f"image {pa.shape[1]}x{pa.shape[0]} is smaller than the "
            f"{_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window"
        )
    x = _luma(pa)
    y = _luma(pb)
    taps = _gaussian_taps()
    mean_x = _window_mean(x, taps)
    mean_y = _window_mean(y, taps)
    var_x = _window_mean(x * x, taps) - mean_x * mean_x
    var_y = _window_mean(y * y, taps) - mean_y * mean_y
    cov_xy = _window_mean(x * y, taps) - mean_x * mean_y
    numer = (2.0 * mean_x * mean_y + _SSIM_C1) * (2.0 * cov_xy + _SSIM_C2)
    denom = (mean_x * mean_x + mean_y * mean_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return float(np.mean(numer / denom))


def colorfulness_from_lab(a_plane, b_plane):
    """sqrt(var(a) + var(b)) with population variances, in double precision."""
    a = np.asarray(a_plane, dtype=np.float64)
    b = np.asarray(b_plane, dtype=np.float64)
    return float(math.sqrt(a.var() + b.var()))


def colorfulness(img, mode="std"):
    """Image colorfulness.

    mode "std" (default): pooled standard deviation of the Lab chroma planes,
    sqrt(var(a) + var(b)).  mode "opponent": the RGB opponent-axis measure
    sqrt(var(rg) + var(yb)) + 0.3 * sqrt(mean(rg)^2 + mean(yb)^2) with
    rg = R - G and yb = (R + G)/2 - B.
    """
    pixels = _pixels(img)
    if mode == "std":
        planes = colorspace.rgb_array_to_lab(pixels)
        return colorfulness_from_lab(planes[1], planes[2])
    if mode == "opponent":
        p = pixels.astype(np.float64)
        rg = p[..., 0] - p[..., 1]
        yb = 0.5 * (p[..., 0] + p[..., 1]) - p[..., 2]
        strength = math.sqrt(rg.var() + yb.var())
        bias = math.sqrt(float(rg.mean()) ** 2 + float(yb.mean()) ** 2)
        return float(strength + 0.3 * bias)
    raise ValueError(f"unknown colorfulness mode {mode!r} (expected 'std' or 'opponent')")


def colorfulness_delta(pred_value, gt_value):
    return abs(float(pred_value) - float(gt_value))


def delta_colorfulness(pred, gt, mode="std"):
    """|colorfulness(pred) - colorfulness(gt)|."""
    return colorfulness_delta(colorfulness(pred, mode), colorfulness(gt, mode))


@dataclasses.dataclass
class ImageMetrics:
    image: str
    psnr_db: float
    ssim: float
    colorfulness_pred: float
    colorfulness_gt: float
    delta_colorfulness: float


@dataclasses.dataclass
class MetricReport:
    """Per-image metric rows plus their corpus reduction.

    The corpus delta_colorfulness defaults to the mean of per-image deltas;
    delta_mode "corpus" reports |mean(pred) - mean(gt)| instead.
    """

    rows: list = dataclasses.field(default_factory=list)

    def add_pair(self, name, pred, gt, colorfulness_mode="std"):
        pred_c = colorfulness(pred, colorfulness_mode)
        gt_c = colorfulness(gt, colorfulness_mode)
        row = ImageMetrics(
            image=name,
            psnr_db=psnr(pred, gt),
            ssim=ssim(pred, gt),
            colorfulness_pred=pred_c,
            colorfulness_gt=gt_c,
            delta_colorfulness=colorfulness_delta(pred_c, gt_c),
        )
        self.rows.append(row)
        return row

    def means(self, delta_mode="per_image"):
        if not self.rows:
            raise ValueError("metric report has no rows to reduce")
        if delta_mode not in ("per_image", "corpus"):
            raise ValueError(f"unknown delta mode {delta_mode!r}")
        out = {}
        for name in METRIC_FIELDS:
            values = [getattr(row, name) for row in self.rows]
            out[name] = float(np.mean(np.asarray(values, dtype=np.float64)))
        if delta_mode == "corpus":
            out["delta_colorfulness"] = colorfulness_delta(
                out["colorfulness_pred"], out["colorfulness_gt"]
            )
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("image",) + METRIC_FIELDS)
            for row in self.rows:
                writer.writerow(
                    [row.image] + [repr(getattr(row, name)) for name in METRIC_FIELDS]
                )

    def write_json(self, path, delta_mode="per_image"):
        with open(path, "w") as fh:
            json.dump(self.means(delta_mode), fh, indent=2, sort_keys=True)
            fh.write("\n")
