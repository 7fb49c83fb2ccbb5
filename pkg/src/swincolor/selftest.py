"""Fast invariant suite behind the ``selftest`` subcommand.

Each suite re-derives its expected values on the spot — finite differences
for gradients, closed-form anchors for colorspace and metrics, structural
identities for the attention and bottleneck plumbing — so a pass is evidence
about the installed build, not about fixtures.  The whole run stays well
under two minutes on a laptop CPU.
"""

import math
import os
import tempfile
import time

import numpy as np

from . import checkpoint as ckpt
from . import colorspace, losses, metrics, model, swin
from . import tensor as T


class SelfTestFailure(AssertionError):
    """A named invariant did not hold; the message says which one."""


def _expect(condition, message):
    if not condition:
        raise SelfTestFailure(message)


# -- gradients ------------------------------------------------------------

def _fd_gradients(label, fn, arrays, rel=1e-3, step=1e-2, max_probes=24):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps tensors built from ``arrays`` to one output tensor; the
    output is contracted to a scalar with a fixed random projection so a
    single backward pass covers every output element.
    """
    leaves = [T.Tensor(a.astype(np.float32), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    proj = np.random.default_rng(99).standard_normal(out.shape).astype(np.float32)
    loss = T.reduce_sum(out * T.Tensor(proj, requires_grad=False))
    loss.backward()

    def probe(pos, index, value):
        frozen = [a.astype(np.float32).copy() for a in arrays]
        frozen[pos].flat[index] = value
        with T.no_grad():
            o = fn(*[T.Tensor(p, requires_grad=False) for p in frozen])
        return float((o.data.astype(np.float64) * proj).sum())

    picker = np.random.default_rng(7)
    for pos, (leaf, base) in enumerate(zip(leaves, arrays)):
        _expect(leaf.grad is not None, f"{label}: input {pos} received no gradient")
        count = min(max_probes, base.size)
        indices = picker.choice(base.size, size=count, replace=False)
        for index in indices:
            x0 = float(base.flat[index])
            fd = (probe(pos, index, x0 + step) - probe(pos, index, x0 - step)) / (2 * step)
            an = float(leaf.grad.flat[index])
            err = abs(an - fd) / max(abs(fd), abs(an), 1.0)
            _expect(
                err <= rel,
                f"{label}: gradient of input {pos} at flat index {index} is off by "
                f"relative {err:.2e} (analytic {an:.6g}, finite-difference {fd:.6g})",
            )


def _check_gradients():
    rng = np.random.default_rng(31)

    x = rng.standard_normal((2, 3, 6, 6)) * 1.5
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4)
    _fd_gradients("conv2d stride-1 input gradient",
                  lambda xx, ww, bb: T.conv2d(xx, ww, bb, stride=1, pad=1), [x, w, b])
    x7 = rng.standard_normal((2, 3, 7, 7)) * 1.5
    _fd_gradients("conv2d stride-2 input gradient",
                  lambda xx, ww, bb: T.conv2d(xx, ww, bb, stride=2, pad=1), [x7, w, b])

    g = rng.standard_normal((1, 4, 3, 3))
    wt = rng.standard_normal((4, 2, 4, 4)) * 0.5
    _fd_gradients("conv2d_transpose gradient",
                  lambda gg, ww: T.conv2d_transpose(gg, ww, stride=2, pad=1, out_hw=(6, 6)),
                  [g, wt])

    a = rng.standard_normal((3, 5, 4))
    m = rng.standard_normal((3, 4, 6))
    _fd_gradients("matmul gradient", T.matmul, [a, m])

    v = rng.standard_normal((4, 7))
    _fd_gradients("leaky_relu gradient", lambda t: T.leaky_relu(t, 0.2), [v + 0.05])
    _fd_gradients("tanh gradient", T.tanh, [v])
    _fd_gradients("softmax gradient", T.softmax, [v])

    gamma = rng.standard_normal(6) * 0.3 + 1.0
    beta = rng.standard_normal(6) * 0.3
    _fd_gradients("layer_norm gradient",
                  T.layer_norm, [rng.standard_normal((5, 6)), gamma, beta])


# -- colorspace -----------------------------------------------------------

def _check_colorspace():
    rng = np.random.default_rng(2024)
    pixels = rng.integers(0, 256, size=(12, 20, 3), dtype=np.uint8)
    back = colorspace.lab_array_to_rgb(colorspace.rgb_array_to_lab(pixels))
    worst = int(np.abs(back.astype(np.int64) - pixels.astype(np.int64)).max())
    _expect(worst <= 1, f"colorspace round trip drifted by {worst} > 1 per 8-bit channel")

    white = colorspace.rgb_array_to_lab(np.full((1, 1, 3), 255, dtype=np.uint8))[:, 0, 0]
    _expect(
        abs(white[0] - 100.0) <= 1e-3 and abs(white[1]) <= 1e-3 and abs(white[2]) <= 1e-3,
        f"white point maps to L*a*b* {tuple(round(float(c), 5) for c in white)}, "
        "expected (100, 0, 0) within 1e-3",
    )

    red_px = np.array([255, 0, 0], dtype=np.uint8).reshape(1, 1, 3)
    red = colorspace.rgb_array_to_lab(red_px)[:, 0, 0]
    anchor = (53.24, 80.09, 67.20)
    for got, want in zip(red, anchor):
        _expect(
            abs(float(got) - want) <= 0.05,
            f"pure red maps to {tuple(round(float(c), 4) for c in red)}, "
            f"expected {anchor} within 0.05",
        )


# -- shifted-window attention ---------------------------------------------

def _check_swin():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.standard_normal((2, 8, 8, 6)).astype(np.float32), requires_grad=False)

    tiles = swin.window_partition(x, 4)
    back = swin.window_reverse(tiles, 4, 8, 8)
    _expect(np.array_equal(back.data, x.data), "window partition/reverse is not an inverse pair")

    rolled = swin.cyclic_shift(x, -2)
    unrolled = swin.cyclic_shift(rolled, 2)
    _expect(np.array_equal(unrolled.data, x.data), "cyclic shift/unshift is not an inverse pair")

    open_mask = swin.build_attention_mask(8, 8, 4, 0)
    _expect(
        bool(np.all(open_mask == 0)),
        "zero-shift attention mask must block nothing (all-zero additive mask)",
    )
    mask = swin.build_attention_mask(8, 8, 4, 2)
    _expect(mask.shape == (4, 16, 16), f"attention mask shape {mask.shape}, expected (4, 16, 16)")
    _expect(
        bool(np.any(mask < 0)) and bool(np.any(mask == 0)),
        "shifted attention mask must mix open (0) and blocked (-inf-like) token pairs",
    )

    idx = swin.relative_position_index(4)
    _expect(
        idx.min() == 0 and idx.max() == 7 * 7 - 1,
        "relative position index must cover exactly the (2w-1)^2 displacement table",
    )


# -- generator / critic structure ------------------------------------------

def _check_model():
    gen = model.ColorizerGenerator(seed=3, base_width=4, heads=4, bottleneck_grid=2)
    light = T.Tensor(np.linspace(-1, 1, 32 * 32, dtype=np.float32).reshape(1, 1, 32, 32),
                     requires_grad=False)
    noise = T.Tensor(model.sample_noise(np.random.default_rng(0), 1, 32, 0.1),
                     requires_grad=False)
    with T.no_grad():
        chroma, trace = gen.forward(light, noise=noise)
    _expect(chroma.shape == (1, 2, 32, 32),
            f"generator output shape {chroma.shape}, expected (1, 2, 32, 32)")
    _expect(bool(np.all(np.abs(chroma.data) <= 1.0)),
            "tanh head must keep chroma within [-1, 1]")
    residual = trace.fused.data + trace.refined_two.data
    _expect(np.array_equal(trace.output.data, residual),
            "bottleneck output must equal fused + second refinement exactly")
    _expect(trace.combined.shape[1] == trace.encoder_out.shape[1] + trace.color_out.shape[1],
            "bottleneck concat width must be encoder width + color-encoder width")

    critic = model.PatchCritic(seed=4, base_width=4)
    with T.no_grad():
        scores = critic.forward(light, chroma)
    _expect(scores.data.ndim == 4 and scores.shape[1] == 1,
            f"critic must emit a one-plane patch score map, got shape {scores.shape}")
    _expect(bool(np.all(np.isfinite(scores.data))), "critic scores must be finite")


# -- objective arithmetic ---------------------------------------------------

def _check_objective():
    weights = losses.LossWeights()
    ones = [T.Tensor(np.asarray(1.0)) for _ in range(4)]
    total = losses.total_loss(*ones, weights).item()
    _expect(total == 111.1, f"unit-loss objective totals {total!r}, expected exactly 111.1")

    rng = np.random.default_rng(17)
    for trial in range(50):
        real = (rng.standard_normal((3, 1, 4, 4)) * 10.0).astype(np.float32)
        fake = (rng.standard_normal((3, 1, 4, 4)) * 10.0).astype(np.float32)
        g, d = losses.wgan_scalar_report(real, fake)
        mean_real = float(real.mean())
        _expect(
            d + g == -mean_real,
            f"score-report identity broke on trial {trial}: "
            f"d + g = {d + g!r}, -mean(real) = {-mean_real!r}",
        )

    params = {
        f"w{i}": T.Tensor((rng.standard_normal((4, 4)) * 0.5).astype(np.float32),
                          requires_grad=True)
        for i in range(3)
    }
    losses.clip_critic(params, 0.01)
    peak = max(float(np.abs(p.data).max()) for p in params.values())
    _expect(peak <= 0.01, f"weight clipping left magnitude {peak:.4g} above the 0.01 bound")


# -- metrics ----------------------------------------------------------------

def _check_metrics():
    rng = np.random.default_rng(8)
    base = rng.integers(30, 216, size=(24, 24, 3)).astype(np.uint8)
    shifted = (base.astype(np.int64) + 10).clip(0, 255).astype(np.uint8)
    got = metrics.psnr(base, shifted)
    want = 20.0 * math.log10(255.0 / 10.0)
    _expect(abs(got - want) <= 1e-9,
            f"PSNR of a uniform +10 offset is {got!r}, expected {want!r}")
    _expect(metrics.psnr(base, base) == metrics.PSNR_CAP_DB,
            "PSNR of identical images must sit at the cap")

    smooth = np.empty((24, 24, 3), dtype=np.uint8)
    smooth[:] = np.linspace(40, 215, 24, dtype=np.uint8)[None, :, None]
    _expect(abs(metrics.ssim(smooth, smooth) - 1.0) <= 1e-9,
            "SSIM of an image with itself must be 1")

    l_plane = np.full((16, 16), 60.0)
    a_plane = np.repeat(10.0 * np.where(np.arange(16) % 2 == 0, 1.0, -1.0)[None, :], 16, axis=0)
    b_plane = np.zeros((16, 16))
    img = colorspace.lab_to_srgb(
        colorspace.LabImage(width=16, height=16, L=l_plane, a=a_plane, b=b_plane)
    )
    value = metrics.colorfulness(img)
    _expect(value > 5.0, f"alternating chroma stripes score colorfulness {value:.3g}, "
                         "expected a clearly positive value")
    _expect(metrics.delta_colorfulness(img, img) == 0.0,
            "colorfulness delta of an image with itself must be 0")

    gray = np.repeat(np.linspace(0, 255, 24, dtype=np.uint8)[None, :, None], 3, axis=2)
    gray = np.repeat(gray, 24, axis=0)
    value = metrics.colorfulness(gray)
    _expect(value < 0.01, f"a gray ramp scores colorfulness {value:.3g}, expected < 0.01")


# -- checkpoint format -------------------------------------------------------

def _check_checkpoint():
    rng = np.random.default_rng(12)
    params = {
        "head.w": T.Tensor(rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
                           requires_grad=True),
        "head.b": T.Tensor(rng.standard_normal(2).astype(np.float32), requires_grad=True),
    }
    fd, path = tempfile.mkstemp(suffix=".ckpt")
    os.close(fd)
    try:
        ckpt.save_checkpoint(
            path,
            step=7,
            config={"seed": 0},
            sections={"generator": {k: v.data for k, v in params.items()}},
        )
        loaded = ckpt.load_checkpoint(path)
        _expect(loaded.step == 7, "checkpoint step did not survive the round trip")
        for name, tensor_ in params.items():
            stored = loaded.sections["generator"][name]
            _expect(np.array_equal(stored, tensor_.data),
                    f"checkpoint round trip altered array {name!r}")
    finally:
        os.unlink(path)


SUITES = (
    ("colorspace", _check_colorspace),
    ("gradients", _check_gradients),
    ("swin", _check_swin),
    ("model", _check_model),
    ("objective", _check_objective),
    ("metrics", _check_metrics),
    ("checkpoint", _check_checkpoint),
)


def run(inject_fault=False, out=print):
    """Run every suite; return 0 iff all passed.

    ``inject_fault`` corrupts the convolution backward pass for the duration
    of the run, which must make the gradient suite fail — it exists so users
    can watch the net catch a real defect before trusting a green run.
    """
    first_failure = None
    if inject_fault:
        T._conv_backward_fault = True
    try:
        for name, check in SUITES:
            started = time.perf_counter()
            try:
                check()
            except Exception as exc:  # noqa: BLE001 - every failure must be reported, not raised
                out(f"FAIL {name}: {exc}")
                if first_failure is None:
                    first_failure = f"{name}: {exc}"
            else:
                out(f"PASS {name} ({time.perf_counter() - started:.2f}s)")
    finally:
        T._conv_backward_fault = False
    if first_failure is None:
        out(f"self-test passed: {len(SUITES)} suites")
        return 0
    out(f"self-test FAILED, first failure: {first_failure}")
    return 1
