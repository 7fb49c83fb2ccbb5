"""Loss terms: WGAN adversarial pair, perceptual, pixel, color, weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class LossWeights:
    """Weights of the four-term objective; defaults are the reference setting."""

    adversarial: float = 0.1
    perceptual: float = 100.0
    pixel: float = 10.0
    color: float = 1.0

    def validate(self):
        for name in ("adversarial", "perceptual", "pixel", "color"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        return self


@dataclass
class LossBundle:
    """Scalar loss report for one training step.

    ``adversarial``/``perceptual``/``pixel``/``color`` are the generator
    objective's components, ``total`` their weighted sum, and ``critic`` the
    critic's own objective from its final update of the step.  For any single
    batch of scores, ``wgan_scalar_report`` produces a (g, d) pair satisfying
    d + g == -mean(real scores) exactly.
    """

    adversarial: float
    perceptual: float
    pixel: float
    color: float
    total: float
    critic: float


def _require_finite_array(name, data):
    if not np.all(np.isfinite(data)):
        raise ValueError(f"non-finite values in {name}")


def wgan_losses(scores_real: T.Tensor, scores_fake: T.Tensor):
    """WGAN objectives over batch+patch means: returns (g_loss, d_loss)."""
    _require_finite_array("scores_real", scores_real.data)
    _require_finite_array("scores_fake", scores_fake.data)
    mean_fake = T.reduce_mean(scores_fake)
    mean_real = T.reduce_mean(scores_real)
    return -mean_fake, mean_fake - mean_real


def wgan_scalar_report(scores_real, scores_fake):
    """Float (g_loss, d_loss) for logging, with the exact-identity guarantee.

    Means are taken at the scores' own precision (the value ``mean()`` hands
    any caller), then combined in double precision.  Because single-precision
    means have 24-bit significands, ``mean_fake - mean_real`` is exact in
    double arithmetic, which makes the defining identity
    ``d_loss + g_loss == -mean(scores_real)`` close exactly instead of
    drifting by an ulp.  A one-ulp reconciliation remains as a backstop for
    pathological magnitude gaps.
    """
    real = np.asarray(scores_real)
    fake = np.asarray(scores_fake)
    mean_real = float(real.mean(dtype=real.dtype))
    mean_fake = float(fake.mean(dtype=fake.dtype))
    g = -mean_fake
    d = mean_fake - mean_real
    if d + g == -mean_real:
        return g, d
    for candidate in _ulp_neighbors(d):
        if candidate + g == -mean_real:
            return g, candidate
    for candidate in _ulp_neighbors(g):
        if d + candidate == -mean_real:
            return candidate, d
    # unreachable for finite, comparable-magnitude scores; fail loudly
    raise ArithmeticError("could not reconcile WGAN identity within 1 ulp")


def _ulp_neighbors(x, width=4):
    up = down = x
    for _ in range(width):
        up = math.nextafter(up, math.inf)
        down = math.nextafter(down, -math.inf)
        yield up
        yield down


def clip_critic(params, c):
    """Clamp every critic parameter into [-c, c] in place (WGAN Lipschitz)."""
    if c <= 0:
        raise ValueError(f"clip threshold must be positive, got {c}")
    for p in params.values():
        np.clip(p.data, -c, c, out=p.data)
    return params


def perceptual_loss(pred_rgb: T.Tensor, gt_rgb: T.Tensor, backbone, tap):
    """Mean squared distance between tap-``tap`` feature maps of the two images."""
    if pred_rgb.shape != gt_rgb.shape:
        raise ValueError(
            f"perceptual loss shape mismatch: {pred_rgb.shape} vs {gt_rgb.shape}"
        )
    diff = backbone.features(pred_rgb, tap) - backbone.features(gt_rgb, tap)
    return T.reduce_mean(T.square(diff))


def l1_loss(pred: T.Tensor, target: T.Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"l1 loss shape mismatch: {pred.shape} vs {target.shape}")
    return T.reduce_mean(T.absolute(pred - target))


def color_loss(color_feats: T.Tensor, target_feats: T.Tensor):
    """Batch-mean L1 between color-encoder output and frozen global features."""
    if color_feats.shape != target_feats.shape:
        raise ValueError(
            f"color loss shape mismatch: {color_feats.shape} vs {target_feats.shape}"
        )
    return T.reduce_mean(T.absolute(color_feats - target_feats))


def total_loss(adversarial, perceptual, pixel, color, weights: LossWeights):
    """Weighted sum, in the objective's term order; rejects non-finite parts."""
    parts = {
        "adversarial": adversarial,
        "perceptual": perceptual,
        "pixel": pixel,
        "color": color,
    }
    for name, part in parts.items():
        _require_finite_array(f"{name} loss", part.data)
    return (
        adversarial * weights.adversarial
        + perceptual * weights.perceptual
        + pixel * weights.pixel
        + color * weights.color
    )


def gradient_penalty(critic, light, chroma_real, chroma_fake, rng):
    """WGAN-GP term on critic input gradients at interpolated chroma.

    Returns (penalty, per-sample gradient norms as ndarray).  The penalty is a
    graph scalar whose backward pass reaches the critic weights through the
    differentiable adjoint built by ``critic.input_gradient``.
    """
    n = chroma_real.shape[0]
    eps = rng.uniform(size=(n, 1, 1, 1)).astype(chroma_real.dtype)
    mixed = eps * chroma_real + (1.0 - eps) * chroma_fake
    stacked = T.concat_channels(
        light if isinstance(light, T.Tensor) else T.Tensor(light),
        T.Tensor(mixed, requires_grad=False),
    )
    grad, _ = critic.input_gradient(stacked)
    norm_sq = T.reduce_sum(T.square(grad), axis=(1, 2, 3))
    norm = T.sqrt(norm_sq + 1e-12)
    return T.reduce_mean(T.square(norm + (-1.0))), np.sqrt(norm_sq.data)
