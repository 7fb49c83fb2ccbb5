"""Shifted-window transformer blocks for the color transformer.

Channels-last layout throughout: feature maps arrive as (N, H, W, C) and
windows as (batch·numWindows, M*M, C) token sequences.  The caller owns the
NCHW <-> NHWC transposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T

MASK_LARGE = 1e4  # additive penalty; saturates softmax in float32 without NaN


@dataclass
class SwinBlockParams:
    """Parameters of one block: attention, MLP, two layer norms."""

    dim: int
    heads: int
    window: int
    shift: int
    norm1_g: T.Tensor
    norm1_b: T.Tensor
    qkv_w: T.Tensor
    qkv_b: T.Tensor
    bias_table: T.Tensor
    proj_w: T.Tensor
    proj_b: T.Tensor
    norm2_g: T.Tensor
    norm2_b: T.Tensor
    mlp1_w: T.Tensor
    mlp1_b: T.Tensor
    mlp2_w: T.Tensor
    mlp2_b: T.Tensor

    def named(self, prefix):
        """Yield (stable name, tensor) pairs for checkpointing."""
        for field in (
            "norm1_g", "norm1_b", "qkv_w", "qkv_b", "bias_table",
            "proj_w", "proj_b", "norm2_g", "norm2_b",
            "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b",
        ):
            yield f"{prefix}.{field}", getattr(self, field)


def init_swin_block(rng, dim, heads, window, shift, mlp_ratio=4):
    if dim % heads != 0:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    if shift not in (0, window // 2):
        raise ValueError(f"shift must be 0 or window//2, got {shift}")
    hidden = mlp_ratio * dim

    def w(*shape):
        return T.Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32),
                        requires_grad=True)

    def zeros(*shape):
        return T.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return T.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    return SwinBlockParams(
        dim=dim, heads=heads, window=window, shift=shift,
        norm1_g=ones(dim), norm1_b=zeros(dim),
        qkv_w=w(3 * dim, dim), qkv_b=zeros(3 * dim),
        bias_table=w((2 * window - 1) ** 2, heads),
        proj_w=w(dim, dim), proj_b=zeros(dim),
        norm2_g=ones(dim), norm2_b=zeros(dim),
        mlp1_w=w(hidden, dim), mlp1_b=zeros(hidden),
        mlp2_w=w(dim, hidden), mlp2_b=zeros(dim),
    )


def effective_window(grid, preferred=8):
    """Largest window size <= preferred that divides the grid side."""
    for m in range(min(preferred, grid), 0, -1):
        if grid % m == 0:
            return m
    return 1


# -- window geometry ----------------------------------------------------------


def window_partition(x: T.Tensor, window: int) -> T.Tensor:
    n, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"window {window} does not divide spatial size {h}x{w}")
    gh, gw = h // window, w // window
    t = T.reshape(x, (n, gh, window, gw, window, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n * gh * gw, window * window, c))


def window_reverse(windows: T.Tensor, window: int, height: int, width: int) -> T.Tensor:
    total, tokens, c = windows.shape
    if tokens != window * window:
        raise ValueError(f"token count {tokens} does not match window {window}")
    gh, gw = height // window, width // window
    if height % window or width % window or total % (gh * gw):
        raise ValueError(
            f"window count {total} inconsistent with {height}x{width} grid of {window}-windows"
        )
    n = total // (gh * gw)
    t = T.reshape(windows, (n, gh, gw, window, window, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n, height, width, c))


def cyclic_shift(x: T.Tensor, offset: int) -> T.Tensor:
    """Toroidal roll of the spatial grid by (-offset, -offset)."""
    if offset == 0:
        return x
    return T.roll2d(x, (-offset, -offset), axes=(1, 2))


# -- masks and bias indexing ---------------------------------------------------


@lru_cache(maxsize=32)
def relative_position_index(window):
    """(M², M²) lookup into the (2M−1)² bias table, row-major relative offsets."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + window - 1  # each in [0, 2M-2]
    return (rel[0] * (2 * window - 1) + rel[1]).astype(np.int64)


@lru_cache(maxsize=32)
def build_attention_mask(height, width, window, shift):
    """Additive (numWindows, M², M²) mask: 0 allowed, −LARGE across regions.

    Region ids label which pre-shift block each cell of the rolled canvas came
    from, per the shifted-window scheme; pairs from different blocks must not
    attend.
    """
    if height % window or width % window:
        raise ValueError(f"window {window} does not divide {height}x{width}")
    if shift not in (0, window // 2):
        raise ValueError(f"shift must be 0 or window//2, got {shift}")
    n_windows = (height // window) * (width // window)
    tokens = window * window
    if shift == 0:
        return np.zeros((n_windows, tokens, tokens), dtype=np.float32)

    ids = np.zeros((height, width), dtype=np.int32)
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    tag = 0
    for hs in spans:
        for ws in spans:
            ids[hs, ws] = tag
            tag += 1
    wins = (
        ids.reshape(height // window, window, width // window, window)
        .transpose(0, 2, 1, 3)
        .reshape(n_windows, tokens)
    )
    different = wins[:, :, None] != wins[:, None, :]
    return np.where(different, np.float32(-MASK_LARGE), np.float32(0.0))


# -- attention and blocks -------------------------------------------------------


def window_attention(tokens: T.Tensor, params: SwinBlockParams, mask=None) -> T.Tensor:
    total, n_tok, c = tokens.shape
    if c != params.dim:
        raise ValueError(f"token dim {c} does not match params.dim {params.dim}")
    heads = params.heads
    hd = c // heads
    scale = float(hd) ** -0.5

    qkv = T.linear(tokens, params.qkv_w, params.qkv_b)         # (B, T, 3C)
    qkv = T.reshape(qkv, (total, n_tok, 3, heads, hd))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))                     # (3, B, heads, T, hd)
    q, k, v = qkv[0], qkv[1], qkv[2]

    attn = T.matmul(q * scale, T.transpose(k, (0, 1, 3, 2)))    # (B, heads, T, T)

    idx = relative_position_index(params.window).reshape(-1)
    bias = T.gather_rows(params.bias_table, idx)                # (T*T, heads)
    bias = T.transpose(T.reshape(bias, (n_tok, n_tok, heads)), (2, 0, 1))
    attn = attn + bias

    if mask is not None and np.any(mask):
        n_win = mask.shape[0]
        if total % n_win:
            raise ValueError(f"window batch {total} not a multiple of mask windows {n_win}")
        attn = T.reshape(attn, (total // n_win, n_win, heads, n_tok, n_tok))
        attn = attn + T.Tensor(mask[:, None].astype(attn.dtype), requires_grad=False)
        attn = T.reshape(attn, (total, heads, n_tok, n_tok))

    attn = T.softmax(attn)
    out = T.matmul(attn, v)                                     # (B, heads, T, hd)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (total, n_tok, c))
    return T.linear(out, params.proj_w, params.proj_b)


def swin_block(x: T.Tensor, params: SwinBlockParams) -> T.Tensor:
    """One block: LN → (shifted) windowed MHSA → residual, LN → MLP → residual."""
    n, h, w, c = x.shape
    m, shift = params.window, params.shift

    shortcut = x
    t = T.layer_norm(x, params.norm1_g, params.norm1_b)
    t = cyclic_shift(t, shift)
    mask = build_attention_mask(h, w, m, shift) if shift else None
    t = window_partition(t, m)
    t = window_attention(t, params, mask)
    t = window_reverse(t, m, h, w)
    t = cyclic_shift(t, -shift)
    x = shortcut + t

    t = T.layer_norm(x, params.norm2_g, params.norm2_b)
    t = T.linear(t, params.mlp1_w, params.mlp1_b)
    t = T.gelu(t)
    t = T.linear(t, params.mlp2_w, params.mlp2_b)
    return x + t
