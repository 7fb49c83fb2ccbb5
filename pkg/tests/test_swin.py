"""Window geometry, shift-mask, and attention checks for the swin module."""

import numpy as np
import pytest

from swincolor import swin
from swincolor import tensor as T

from fdcheck import check_gradients


def _rand(*shape, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


# -- window partition / reverse ----------------------------------------------


def test_partition_counts():
    x = T.Tensor(_rand(2, 8, 8, 3))
    wins = swin.window_partition(x, 4)
    assert wins.shape == (2 * 4, 16, 3)
    single = swin.window_partition(T.Tensor(_rand(1, 8, 8, 3)), 8)
    assert single.shape == (1, 64, 3)


def test_partition_matches_index_map_oracle():
    # direct index-map oracle: place every pixel by explicit loop arithmetic
    x = _rand(2, 8, 8, 3, seed=3)
    m = 4
    gw = 8 // m
    want = np.zeros((2 * gw * gw, m * m, 3), dtype=np.float32)
    for n in range(2):
        for wi in range(gw):
            for wj in range(gw):
                for i in range(m):
                    for j in range(m):
                        want[n * gw * gw + wi * gw + wj, i * m + j] = x[
                            n, wi * m + i, wj * m + j
                        ]
    got = swin.window_partition(T.Tensor(x), m).data
    np.testing.assert_array_equal(got, want)

    back = swin.window_reverse(T.Tensor(got), m, 8, 8).data
    np.testing.assert_array_equal(back, x)


def test_partition_reverse_inverse_pair():
    x = T.Tensor(_rand(2, 8, 8, 3, seed=1))
    back = swin.window_reverse(swin.window_partition(x, 4), 4, 8, 8)
    np.testing.assert_array_equal(back.data, x.data)
    # single-window degenerate case
    y = T.Tensor(_rand(1, 4, 4, 5, seed=2))
    back2 = swin.window_reverse(swin.window_partition(y, 4), 4, 4, 4)
    np.testing.assert_array_equal(back2.data, y.data)


def test_partition_rejects_indivisible():
    with pytest.raises(ValueError):
        swin.window_partition(T.Tensor(_rand(1, 6, 8, 3)), 4)
    with pytest.raises(ValueError):
        swin.window_reverse(T.Tensor(_rand(3, 16, 3)), 4, 8, 8)
    with pytest.raises(ValueError):
        swin.window_reverse(T.Tensor(_rand(4, 16, 3)), 4, 8, 6)


def test_cyclic_shift():
    x = np.zeros((1, 8, 8, 1), dtype=np.float32)
    x[0, 0, 0, 0] = 1.0
    out = swin.cyclic_shift(T.Tensor(x), 2).data
    assert out[0, 6, 6, 0] == 1.0 and out.sum() == 1.0

    y = T.Tensor(_rand(2, 8, 8, 3, seed=4))
    ident = swin.cyclic_shift(swin.cyclic_shift(y, 3), -3)
    np.testing.assert_array_equal(ident.data, y.data)
    assert swin.cyclic_shift(y, 0) is y


# -- attention mask ------------------------------------------------------------


def _oracle_mask(height, width, window, shift):
    """Brute-force mask from first principles: a token pair may attend iff its
    displacement inside the rolled canvas equals its displacement in the
    original image (no wrap-around between them)."""
    gh, gw = height // window, width // window
    tokens = window * window
    out = np.zeros((gh * gw, tokens, tokens), dtype=np.float32)
    for wi in range(gh):
        for wj in range(gw):
            widx = wi * gw + wj
            cells = [
                (wi * window + i, wj * window + j)
                for i in range(window)
                for j in range(window)
            ]
            for p, (pr, pc) in enumerate(cells):
                for q, (qr, qc) in enumerate(cells):
                    # rolled canvas position r holds original pixel (r+shift) mod size
                    opr, opc = (pr + shift) % height, (pc + shift) % width
                    oqr, oqc = (qr + shift) % height, (qc + shift) % width
                    preserved = (opr - oqr == pr - qr) and (opc - oqc == pc - qc)
                    if not preserved:
                        out[widx, p, q] = -swin.MASK_LARGE
    return out


@pytest.mark.parametrize("dims", [(8, 8, 4, 2), (16, 16, 8, 4), (4, 4, 4, 2)])
def test_mask_matches_brute_force_oracle(dims):
    h, w, m, s = dims
    got = swin.build_attention_mask(h, w, m, s)
    want = _oracle_mask(h, w, m, s)
    np.testing.assert_array_equal(got, want)


def test_mask_zero_shift_is_all_zero():
    mask = swin.build_attention_mask(8, 8, 4, 0)
    assert mask.shape == (4, 16, 16)
    assert not mask.any()


def test_mask_symmetry_and_census():
    mask = swin.build_attention_mask(16, 16, 8, 4)
    np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))
    # boundary windows must mask at least one pair whenever H > M
    assert (mask < 0).any()
    # interior window (top-left) sees no wrap at all
    assert not mask[0].any()


def test_relative_position_index_range():
    idx = swin.relative_position_index(4)
    assert idx.shape == (16, 16)
    assert idx.min() == 0 and idx.max() == 48  # (2*4-1)^2 - 1
    # zero offset maps every diagonal entry to the table center
    assert len(set(idx[np.arange(16), np.arange(16)])) == 1


# -- attention -----------------------------------------------------------------


def _numpy_attention(tokens, p, mask):
    """Direct numpy evaluation of the windowed attention, no autodiff graph."""
    b, t, c = tokens.shape
    heads, hd = p.heads, c // p.heads
    qkv = tokens @ p.qkv_w.data.T + p.qkv_b.data
    q, k, v = qkv.reshape(b, t, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    attn = (q * hd ** -0.5) @ k.transpose(0, 1, 3, 2)
    idx = swin.relative_position_index(p.window).reshape(-1)
    attn = attn + p.bias_table.data[idx].reshape(t, t, heads).transpose(2, 0, 1)
    if mask is not None:
        nw = mask.shape[0]
        attn = (attn.reshape(b // nw, nw, heads, t, t) + mask[None, :, None]).reshape(
            b, heads, t, t
        )
    e = np.exp(attn - attn.max(axis=-1, keepdims=True))
    weights = e / e.sum(axis=-1, keepdims=True)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
    return out @ p.proj_w.data.T + p.proj_b.data, weights


def test_attention_matches_numpy_and_rows_sum_to_one():
    rng = np.random.default_rng(9)
    p = swin.init_swin_block(rng, dim=8, heads=2, window=4, shift=2)
    mask = swin.build_attention_mask(8, 8, 4, 2)
    tokens = _rand(4, 16, 8, seed=10)
    got = swin.window_attention(T.Tensor(tokens), p, mask).data
    want, weights = _numpy_attention(tokens, p, mask)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-5)
    # masked pairs get negligible attention weight
    blocked = np.broadcast_to(mask[:, None] < 0, weights.shape)
    assert weights[blocked].max() < 1e-6


def test_attention_locality_zero_shift():
    rng = np.random.default_rng(12)
    p = swin.init_swin_block(rng, dim=8, heads=2, window=4, shift=0)
    tokens = _rand(4, 16, 8, seed=13)
    base = swin.window_attention(T.Tensor(tokens), p, None).data
    bumped = tokens.copy()
    bumped[0] += 0.5  # perturb only window 0
    out = swin.window_attention(T.Tensor(bumped), p, None).data
    assert not np.allclose(out[0], base[0])
    np.testing.assert_array_equal(out[1:], base[1:])


def test_attention_uniform_tokens_closed_form():
    rng = np.random.default_rng(15)
    p = swin.init_swin_block(rng, dim=6, heads=2, window=4, shift=2)
    p.bias_table.data[:] = 0.0
    vec = rng.normal(size=6).astype(np.float32)
    tokens = np.broadcast_to(vec, (4, 16, 6)).copy()
    mask = swin.build_attention_mask(8, 8, 4, 2)
    out = swin.window_attention(T.Tensor(tokens), p, mask).data
    # every value row is identical, so any weighting returns that row
    v = vec @ p.qkv_w.data[12:].T + p.qkv_b.data[12:]
    want = v @ p.proj_w.data.T + p.proj_b.data
    np.testing.assert_allclose(out, np.broadcast_to(want, out.shape), rtol=1e-5, atol=1e-6)


def test_attention_rejects_dim_mismatch():
    rng = np.random.default_rng(16)
    p = swin.init_swin_block(rng, dim=8, heads=2, window=4, shift=0)
    with pytest.raises(ValueError):
        swin.window_attention(T.Tensor(_rand(4, 16, 6)), p, None)


# -- full block ----------------------------------------------------------------


def test_block_shape_and_identity_when_branches_zeroed():
    rng = np.random.default_rng(21)
    p = swin.init_swin_block(rng, dim=8, heads=2, window=4, shift=2)
    p.proj_w.data[:] = 0.0
    p.proj_b.data[:] = 0.0
    p.mlp2_w.data[:] = 0.0
    p.mlp2_b.data[:] = 0.0
    x = _rand(2, 8, 8, 8, seed=22)
    out = swin.swin_block(T.Tensor(x), p)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("shift", [0, 2])
def test_block_gradients_vs_finite_differences(shift):
    rng = np.random.default_rng(30 + shift)
    dim, heads, window = 8, 2, 4
    x = np.random.default_rng(31).normal(size=(1, 8, 8, dim)) * 0.5

    proto = swin.init_swin_block(rng, dim, heads, window, shift)
    names = [n.split(".", 1)[1] for n, _ in proto.named("p")]
    arrays = [x] + [getattr(proto, n).data.astype(np.float64) for n in names]

    def build(ts):
        kwargs = dict(zip(names, ts[1:]))
        p = swin.SwinBlockParams(dim=dim, heads=heads, window=window, shift=shift, **kwargs)
        return T.reduce_mean(T.square(swin.swin_block(ts[0], p)))

    worst = check_gradients(build, arrays, eps=1e-5, rtol=1e-3, atol=1e-8)
    assert worst <= 1e-3
