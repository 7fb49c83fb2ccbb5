"""Generator, PatchGAN critic, and the frozen perceptual backbone.

All parameter sets are plain ``{name: Tensor}`` dicts with stable,
checkpoint-addressable names.  Layout is NCHW except inside the swin blocks,
which run channels-last; the boundary transposes live here.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import swin
from . import tensor as T

ABLATIONS = ("full", "unet", "no_color_encoder", "no_color_transformer")

# channels of the noise tensor and of the backbone's global feature map;
# the color encoder maps one onto the other, so they are pinned together
NOISE_CHANNELS = 64
GLOBAL_FEATURE_CHANNELS = 64


def _conv_init(rng, cout, cin, k, std=None):
    # He-style fan-in scaling keeps feature magnitudes roughly constant
    # through the stack at any width; a flat std starves narrow models
    if std is None:
        std = math.sqrt(2.0 / (cin * k * k))
    w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)
    return T.Tensor(w, requires_grad=True), T.Tensor(
        np.zeros(cout, dtype=np.float32), requires_grad=True
    )


def _register_conv(params, rng, name, cout, cin, k, std=None):
    params[f"{name}.w"], params[f"{name}.b"] = _conv_init(rng, cout, cin, k, std)


def _conv(params, name, x, stride=1, pad=0, slope=0.2):
    out = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=pad)
    if slope is not None:
        out = T.leaky_relu(out, slope)
    return out


@dataclass
class BottleneckTrace:
    """Intermediates of the color-transform bottleneck, in application order:
    encoder features, color-encoder features, their concatenation, the fusion
    conv, the two swin refinements, and the residual sum fed to the decoder."""

    encoder_out: T.Tensor
    color_out: Optional[T.Tensor]
    combined: Optional[T.Tensor]
    fused: Optional[T.Tensor]
    refined_one: Optional[T.Tensor]
    refined_two: Optional[T.Tensor]
    output: T.Tensor


def noise_shape(batch, image_size):
    if image_size % 16:
        raise ValueError(f"image size {image_size} not divisible by 16")
    s = image_size // 16
    return (batch, NOISE_CHANNELS, s, s)


def sample_noise(rng, batch, image_size, std):
    """Gaussian color-seed noise, mean 0, the configured standard deviation."""
    return rng.normal(0.0, std, size=noise_shape(batch, image_size)).astype(np.float32)


# -- frozen perceptual backbone ------------------------------------------------


class PerceptualBackbone:
    """Fixed-seed frozen CNN standing in for a pretrained feature extractor.

    Four stride-2 stages with taps after each activation; tap ``k`` feeds the
    perceptual loss and the deepest tap doubles as the global feature map for
    the color loss.  Weights never receive gradients.
    """

    STAGE_WIDTHS = (16, 32, 64, GLOBAL_FEATURE_CHANNELS)

    def __init__(self, seed=1234):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = {}
        cin = 3
        for i, cout in enumerate(self.STAGE_WIDTHS, start=1):
            # He-style scale keeps feature magnitudes O(1) through the stack
            std = float(np.sqrt(2.0 / (cin * 16)))
            w = rng.normal(0.0, std, size=(cout, cin, 4, 4)).astype(np.float32)
            self.params[f"stage{i}.w"] = T.Tensor(w, requires_grad=False)
            self.params[f"stage{i}.b"] = T.Tensor(
                np.zeros(cout, dtype=np.float32), requires_grad=False
            )
            cin = cout

    @property
    def taps(self):
        return tuple(range(1, len(self.STAGE_WIDTHS) + 1))

    def feature_pyramid(self, rgb_norm: T.Tensor):
        """All tap outputs, shallowest first; input is RGB scaled to [-1, 1]."""
        if rgb_norm.shape[1] != 3:
            raise ValueError(f"backbone expects 3 input channels, got {rgb_norm.shape[1]}")
        feats = []
        x = rgb_norm
        for i in range(1, len(self.STAGE_WIDTHS) + 1):
            x = T.conv2d(x, self.params[f"stage{i}.w"], self.params[f"stage{i}.b"],
                         stride=2, pad=1)
            x = T.leaky_relu(x, 0.2)
            feats.append(x)
        return feats

    def features(self, rgb_norm: T.Tensor, tap):
        if tap not in self.taps:
            raise ValueError(f"invalid backbone tap {tap}; valid taps are {self.taps}")
        x = rgb_norm
        for i in range(1, tap + 1):
            x = T.conv2d(x, self.params[f"stage{i}.w"], self.params[f"stage{i}.b"],
                         stride=2, pad=1)
            x = T.leaky_relu(x, 0.2)
        return x

    def global_features(self, rgb_norm: T.Tensor):
        """Deepest tap: (N, 64, H/16, W/16), the color-loss target."""
        return self.features(rgb_norm, self.taps[-1])

    def weights_digest(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def load_external(self, path):
        """Import externally exported feature-extractor weights (.npz).

        Arrays must match the surrogate's parameter names and shapes, letting
        features distilled from a real pretrained network replace the
        fixed-seed surrogate for parity experiments.
        """
        with np.load(path) as archive:
            for name, p in self.params.items():
                if name not in archive:
                    raise KeyError(f"external backbone archive missing {name!r}")
                arr = archive[name].astype(np.float32)
                if arr.shape != p.data.shape:
                    raise ValueError(
                        f"external backbone {name!r} shape {arr.shape} != {p.data.shape}"
                    )
                p.data = arr


# -- generator -------------------------------------------------------------------


class ColorizerGenerator:
    """U-shaped colorization generator with a noise-driven color branch.

    Encoder: 4 stride-2 conv stages, each of stages 2-4 concatenating an
    adapted backbone feature map.  Bottleneck: the color transformer fuses
    encoder and color-encoder features and refines them with two swin blocks.
    Decoder: 4 skip-concatenating upsample stages and a tanh head emitting the
    two normalized chroma planes.
    """

    def __init__(self, seed=0, base_width=32, ablation="full", heads=8,
                 window=0, mlp_ratio=4, inject_width=16, bottleneck_grid=4):
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
        w = base_width
        self.base_width = w
        self.ablation = ablation
        self.inject_width = inject_width
        self.enc_widths = (w, 2 * w, 4 * w, 8 * w)
        self.bottleneck = 8 * w

        rng = np.random.default_rng(seed)
        p = {}

        cin = 1
        bb = PerceptualBackbone.STAGE_WIDTHS
        for i, cout in enumerate(self.enc_widths, start=1):
            if i > 1:
                _register_conv(p, rng, f"inject{i}", inject_width, bb[i - 2], 1)
                cin += inject_width
            _register_conv(p, rng, f"enc{i}", cout, cin, 4)
            cin = cout

        has_color_encoder = ablation in ("full", "no_color_transformer")
        has_transformer = ablation in ("full", "no_color_encoder")
        self.has_color_encoder = has_color_encoder
        self.has_transformer = has_transformer

        if has_color_encoder:
            _register_conv(p, rng, "color_enc1", 128, NOISE_CHANNELS, 3)
            _register_conv(p, rng, "color_enc2", 128, 128, 3)
            _register_conv(p, rng, "color_enc3", GLOBAL_FEATURE_CHANNELS, 128, 3)

        if ablation != "unet":
            fuse_in = self.bottleneck + (GLOBAL_FEATURE_CHANNELS if has_color_encoder else 0)
            _register_conv(p, rng, "fuse", self.bottleneck, fuse_in, 3)

        self.swin_blocks = []
        if has_transformer:
            m = window if window else swin.effective_window(bottleneck_grid)
            if bottleneck_grid % m:
                raise ValueError(f"window {m} does not divide bottleneck grid {bottleneck_grid}")
            for i, shift in enumerate((0, m // 2), start=1):
                blk = swin.init_swin_block(rng, self.bottleneck, heads, m, shift,
                                           mlp_ratio=mlp_ratio)
                self.swin_blocks.append(blk)
                p.update(blk.named(f"swin{i}"))

        # decoder stage i consumes concat(previous output, skip at its own grid)
        dec_widths = (4 * w, 2 * w, w, w)
        dec_ins = (2 * self.bottleneck, 8 * w, 4 * w, 2 * w)
        for i, (cin_i, cout) in enumerate(zip(dec_ins, dec_widths), start=1):
            _register_conv(p, rng, f"dec{i}", cout, cin_i, 3)
        _register_conv(p, rng, "head", 2, w, 1)

        self.params = p

    # encoder ---------------------------------------------------------------

    def encode(self, light: T.Tensor, injected=None):
        """4 downsampling stages; returns (skips at H/2..H/16, bottleneck)."""
        n, c, h, w = light.shape
        if c != 1:
            raise ValueError(f"encoder expects a single lightness channel, got {c}")
        if h % 16 or w % 16:
            raise ValueError(f"spatial size {h}x{w} not divisible by 16")
        if injected is not None and len(injected) < 3:
            raise ValueError(f"need 3 injected feature maps, got {len(injected)}")
        skips = []
        x = light
        for i in range(1, 5):
            if i > 1 and injected is not None:
                feat = injected[i - 2]
                feat = T.resize_nearest(feat, (x.shape[2], x.shape[3]))
                adapted = _conv(self.params, f"inject{i}", feat, slope=None)
                x = T.concat_channels(x, adapted)
            elif i > 1:
                zeros = np.zeros(
                    (n, self.inject_width, x.shape[2], x.shape[3]), dtype=x.data.dtype
                )
                x = T.concat_channels(x, T.Tensor(zeros, requires_grad=False))
            x = _conv(self.params, f"enc{i}", x, stride=2, pad=1)
            skips.append(x)
        return skips, skips[-1]

    # color branch ------------------------------------------------------------

    def color_encode(self, noise: T.Tensor):
        """Map Gaussian noise to a feature map shaped like the backbone's
        global features."""
        if not self.has_color_encoder:
            raise RuntimeError(f"ablation {self.ablation!r} has no color encoder")
        if noise.shape[1] != NOISE_CHANNELS:
            raise ValueError(f"noise must have {NOISE_CHANNELS} channels, got {noise.shape[1]}")
        x = _conv(self.params, "color_enc1", noise, pad=1)
        x = _conv(self.params, "color_enc2", x, pad=1)
        return _conv(self.params, "color_enc3", x, pad=1, slope=None)

    # bottleneck ---------------------------------------------------------------

    def color_transform(self, encoder_out: T.Tensor, color_out=None):
        """Fuse encoder and color features, refine with swin blocks, add back."""
        if self.ablation == "unet":
            return encoder_out, BottleneckTrace(
                encoder_out=encoder_out, color_out=None, combined=None, fused=None,
                refined_one=None, refined_two=None, output=encoder_out,
            )
        combined = None
        x = encoder_out
        if self.has_color_encoder:
            if color_out is None:
                raise ValueError("this configuration requires color-encoder features")
            if color_out.shape[2:] != encoder_out.shape[2:]:
                color_out = T.resize_nearest(color_out, encoder_out.shape[2:])
            combined = T.concat_channels(encoder_out, color_out)
            x = combined
        fused = _conv(self.params, "fuse", x, pad=1, slope=None)

        refined_one = refined_two = None
        out = fused
        if self.has_transformer:
            t = T.transpose(fused, (0, 2, 3, 1))
            t = swin.swin_block(t, self.swin_blocks[0])
            refined_one = T.transpose(t, (0, 3, 1, 2))
            t = swin.swin_block(t, self.swin_blocks[1])
            refined_two = T.transpose(t, (0, 3, 1, 2))
            out = fused + refined_two

        return out, BottleneckTrace(
            encoder_out=encoder_out, color_out=color_out if self.has_color_encoder else None,
            combined=combined, fused=fused,
            refined_one=refined_one, refined_two=refined_two, output=out,
        )

    # decoder --------------------------------------------------------------------

    def decode(self, bottleneck: T.Tensor, skips):
        """4 skip-fusing upsample stages, then the 1x1 tanh chroma head."""
        if len(skips) != 4:
            raise ValueError(f"decoder needs 4 skip tensors, got {len(skips)}")
        x = bottleneck
        for i in range(1, 5):
            skip = skips[4 - i]
            if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
                raise ValueError(
                    f"skip {4 - i} shape {skip.shape} incompatible with decoder "
                    f"stage {i} input {x.shape}"
                )
            x = T.concat_channels(x, skip)
            x = T.upsample2x(x)
            x = _conv(self.params, f"dec{i}", x, pad=1)
        x = T.conv2d(x, self.params["head.w"], self.params["head.b"])
        return T.tanh(x)

    # full forward ------------------------------------------------------------------

    def forward(self, light: T.Tensor, noise=None, injected=None, backbone=None):
        """light (N,1,H,W) in [-1,1] -> (abn_pred (N,2,H,W), BottleneckTrace).

        ``injected`` may carry precomputed backbone features; otherwise they
        are derived from the gray image via ``backbone`` when given.
        """
        if injected is None and backbone is not None:
            gray = T.concat([light, light, light], axis=1)
            injected = backbone.feature_pyramid(gray)[:3]
        skips, encoder_out = self.encode(light, injected)
        color_out = None
        if self.has_color_encoder:
            if noise is None:
                raise ValueError("this configuration requires a noise tensor")
            color_out = self.color_encode(noise)
        bottleneck, trace = self.color_transform(encoder_out, color_out)
        abn = self.decode(bottleneck, skips)
        return abn, trace

    def named_parameters(self):
        return dict(self.params)

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag


# -- critic ---------------------------------------------------------------------


class PatchCritic:
    """Convolutional patch critic over the stacked (L, ab) planes.

    Three stride-2 and two stride-1 4x4 convs map 64x64 inputs to a 6x6 grid
    of unbounded scores.  No normalization layers and nothing that reads
    batch-global statistics, as the WGAN regime requires.
    """

    def __init__(self, seed=0, base_width=32, in_channels=3):
        rng = np.random.default_rng(seed)
        w = base_width
        plan = [
            (w, 2), (2 * w, 2), (4 * w, 2), (8 * w, 1), (1, 1),
        ]
        self.plan = plan
        self.params = {}
        cin = in_channels
        for i, (cout, _) in enumerate(plan, start=1):
            _register_conv(self.params, rng, f"stage{i}", cout, cin, 4)
            cin = cout

    def forward(self, light: T.Tensor, chroma: T.Tensor):
        if light.shape[0] != chroma.shape[0] or light.shape[2:] != chroma.shape[2:]:
            raise ValueError(
                f"lightness {light.shape} and chroma {chroma.shape} are misaligned"
            )
        return self.forward_stacked(T.concat_channels(light, chroma))

    def forward_stacked(self, stacked: T.Tensor):
        scores, _ = self._run(stacked, collect=False)
        return scores

    def _run(self, x: T.Tensor, collect):
        layers = []
        n_stages = len(self.plan)
        for i, (_, stride) in enumerate(self.plan, start=1):
            in_hw = (x.shape[2], x.shape[3])
            x = T.conv2d(x, self.params[f"stage{i}.w"], self.params[f"stage{i}.b"],
                         stride=stride, pad=1)
            last = i == n_stages
            if collect:
                layers.append((None if last else x.data.copy(), f"stage{i}", stride, in_hw))
            if not last:
                x = T.leaky_relu(x, 0.2)
        return x, layers

    def input_gradient(self, stacked: T.Tensor):
        """Differentiable gradient of the summed score map w.r.t. the input.

        Builds the adjoint pass as graph ops so a penalty on the gradient norm
        can itself be backpropagated into the critic weights.  Activation
        masks are held constant, the usual piecewise-linear double-backprop
        semantics.
        """
        scores, layers = self._run(stacked, collect=True)
        g = T.Tensor(np.ones(scores.shape, dtype=scores.data.dtype), requires_grad=False)
        for preact, name, stride, in_hw in reversed(layers):
            if preact is not None:
                mask = np.where(preact > 0, 1.0, 0.2).astype(preact.dtype)
                g = g * T.Tensor(mask, requires_grad=False)
            g = T.conv2d_transpose(g, self.params[f"{name}.w"], stride, 1, in_hw)
        return g, scores

    def named_parameters(self):
        return dict(self.params)

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
