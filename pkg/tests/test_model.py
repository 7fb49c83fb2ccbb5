"""Generator, critic, and backbone structure/behavior tests."""

import numpy as np
import pytest

from swincolor import model, swin
from swincolor import tensor as T


def _rand(*shape, seed=0, scale=1.0):
    return (np.random.default_rng(seed).normal(size=shape) * scale).astype(np.float32)


@pytest.fixture(scope="module")
def gen():
    return model.ColorizerGenerator(seed=1, base_width=8, heads=4)


@pytest.fixture(scope="module")
def backbone():
    return model.PerceptualBackbone(seed=1234)


# -- encoder -------------------------------------------------------------------


def test_encode_shapes(gen):
    light = T.Tensor(_rand(2, 1, 64, 64, seed=2))
    skips, bottleneck = gen.encode(light)
    assert [s.shape[2] for s in skips] == [32, 16, 8, 4]
    assert bottleneck.shape == (2, 8 * gen.base_width, 4, 4)
    assert skips[-1] is bottleneck


def test_encode_rejects_bad_input(gen):
    with pytest.raises(ValueError):
        gen.encode(T.Tensor(_rand(1, 1, 60, 64)))
    with pytest.raises(ValueError):
        gen.encode(T.Tensor(_rand(1, 3, 64, 64)))
    with pytest.raises(ValueError):
        gen.encode(T.Tensor(_rand(1, 1, 64, 64)), injected=[T.Tensor(_rand(1, 16, 32, 32))])


def test_encode_zeroed_adapters_match_plain_unet_encoder(backbone):
    g = model.ColorizerGenerator(seed=3, base_width=8, heads=4)
    light = T.Tensor(_rand(1, 1, 64, 64, seed=4))
    gray = T.concat([light] * 3, axis=1)
    injected = backbone.feature_pyramid(gray)[:3]
    for i in (2, 3, 4):
        g.params[f"inject{i}.w"].data[:] = 0.0
        g.params[f"inject{i}.b"].data[:] = 0.0
    skips, _ = g.encode(light, injected)

    # plain U-Net encoder: same stage weights with injection columns dropped
    x = light
    cin = 1
    for i in range(1, 5):
        w = g.params[f"enc{i}.w"]
        sliced = T.Tensor(w.data[:, :cin].copy())
        x = T.conv2d(x, sliced, g.params[f"enc{i}.b"], stride=2, pad=1)
        x = T.leaky_relu(x, 0.2)
        np.testing.assert_allclose(skips[i - 1].data, x.data, rtol=1e-5, atol=1e-6)
        cin = w.shape[0]


def test_encoder_gradient_census(gen, backbone):
    light = T.Tensor(_rand(2, 1, 64, 64, seed=5))
    gray = T.concat([light] * 3, axis=1)
    injected = backbone.feature_pyramid(gray)[:3]
    skips, bottleneck = gen.encode(light, injected)
    T.reduce_mean(T.square(bottleneck)).backward()
    for name, p in gen.params.items():
        if name.startswith(("enc", "inject")):
            assert p.grad is not None and np.linalg.norm(p.grad) > 0, name
    T.zero_grads(gen.params)


# -- color branch ---------------------------------------------------------------


def test_color_encode_matches_global_feature_shape(gen, backbone):
    rng = np.random.default_rng(6)
    noise = T.Tensor(model.sample_noise(rng, 2, 64, 0.1))
    out = gen.color_encode(noise)
    rgb = T.Tensor(_rand(2, 3, 64, 64, seed=7))
    target = backbone.global_features(rgb)
    assert out.shape == target.shape


def test_color_encode_deterministic_and_bias_constant(gen):
    noise = T.Tensor(model.sample_noise(np.random.default_rng(8), 1, 64, 0.1))
    a = gen.color_encode(noise).data
    b = gen.color_encode(noise).data
    np.testing.assert_array_equal(a, b)

    g2 = model.ColorizerGenerator(seed=9, base_width=8, heads=4)
    for name in ("color_enc1", "color_enc2", "color_enc3"):
        g2.params[f"{name}.w"].data[:] = 0.0
        g2.params[f"{name}.b"].data[:] = 0.0
    g2.params["color_enc3.b"].data[:] = 0.75
    out = g2.color_encode(noise).data
    np.testing.assert_array_equal(out, np.full_like(out, 0.75))


def test_sample_noise_moments():
    rng = np.random.default_rng(10)
    draws = model.sample_noise(rng, 100, 64, 0.1)  # 100*64*4*4 = 102400 draws
    flat = draws.ravel()
    assert flat.size >= 1e5
    assert abs(flat.mean()) < 5e-3
    assert abs(flat.std() - 0.1) < 5e-3


def test_noise_shape_contract():
    assert model.noise_shape(4, 64) == (4, 64, 4, 4)
    with pytest.raises(ValueError):
        model.noise_shape(1, 60)


# -- color transform ---------------------------------------------------------------


def test_color_transform_trace_identities(gen):
    enc = T.Tensor(_rand(2, 8 * gen.base_width, 4, 4, seed=11))
    col = T.Tensor(_rand(2, model.GLOBAL_FEATURE_CHANNELS, 4, 4, seed=12))
    out, trace = gen.color_transform(enc, col)
    assert trace.combined.shape[1] == enc.shape[1] + col.shape[1]
    assert trace.fused.shape == trace.refined_one.shape == trace.refined_two.shape
    assert out is trace.output
    np.testing.assert_array_equal(trace.output.data, trace.fused.data + trace.refined_two.data)


def test_color_transform_identity_swin_doubles_fusion(gen):
    saved = {n: gen.params[n].data.copy() for n in gen.params if n.startswith("swin")}
    try:
        for blk in gen.swin_blocks:
            blk.proj_w.data[:] = 0.0
            blk.proj_b.data[:] = 0.0
            blk.mlp2_w.data[:] = 0.0
            blk.mlp2_b.data[:] = 0.0
        enc = T.Tensor(_rand(1, 8 * gen.base_width, 4, 4, seed=13))
        col = T.Tensor(_rand(1, model.GLOBAL_FEATURE_CHANNELS, 4, 4, seed=14))
        _, trace = gen.color_transform(enc, col)
        np.testing.assert_array_equal(trace.output.data, 2.0 * trace.fused.data)
    finally:
        for n, v in saved.items():
            gen.params[n].data[:] = v


def test_color_transform_equals_stepwise_composition(gen):
    enc = T.Tensor(_rand(2, 8 * gen.base_width, 4, 4, seed=15))
    col = T.Tensor(_rand(2, model.GLOBAL_FEATURE_CHANNELS, 4, 4, seed=16))
    out, _ = gen.color_transform(enc, col)

    # the five standalone steps, applied one at a time
    combined = T.concat_channels(enc, col)
    fused = T.conv2d(combined, gen.params["fuse.w"], gen.params["fuse.b"], pad=1)
    t = T.transpose(fused, (0, 2, 3, 1))
    t = swin.swin_block(t, gen.swin_blocks[0])
    t = swin.swin_block(t, gen.swin_blocks[1])
    refined = T.transpose(t, (0, 3, 1, 2))
    want = fused + refined
    np.testing.assert_array_equal(out.data, want.data)


def test_color_transform_rejects_missing_color_features(gen):
    enc = T.Tensor(_rand(1, 8 * gen.base_width, 4, 4, seed=17))
    with pytest.raises(ValueError):
        gen.color_transform(enc, None)


# -- decoder ----------------------------------------------------------------------


def test_decode_shape_range_and_mismatch(gen):
    light = T.Tensor(_rand(2, 1, 64, 64, seed=18))
    skips, bottleneck = gen.encode(light)
    out = gen.decode(bottleneck, skips)
    assert out.shape == (2, 2, 64, 64)
    assert np.all(np.abs(out.data) < 1.0)
    bad = list(skips)
    bad[1] = T.Tensor(_rand(2, 2 * gen.base_width, 8, 8, seed=19))
    with pytest.raises(ValueError):
        gen.decode(bottleneck, bad)


def test_decoder_gradient_census(gen):
    light = T.Tensor(_rand(1, 1, 64, 64, seed=20))
    skips, bottleneck = gen.encode(light)
    out = gen.decode(bottleneck, skips)
    T.reduce_mean(T.square(out)).backward()
    for name, p in gen.params.items():
        if name.startswith(("dec", "head")):
            assert p.grad is not None and np.linalg.norm(p.grad) > 0, name
    T.zero_grads(gen.params)


# -- full generator -----------------------------------------------------------------


def test_generator_deterministic_and_noise_sensitive(gen, backbone):
    light = T.Tensor(_rand(1, 1, 64, 64, seed=21))
    noise1 = T.Tensor(model.sample_noise(np.random.default_rng(22), 1, 64, 0.1))
    noise2 = T.Tensor(model.sample_noise(np.random.default_rng(23), 1, 64, 0.1))
    a1, _ = gen.forward(light, noise1, backbone=backbone)
    a2, _ = gen.forward(light, noise1, backbone=backbone)
    np.testing.assert_array_equal(a1.data, a2.data)
    b, _ = gen.forward(light, noise2, backbone=backbone)
    assert not np.array_equal(a1.data, b.data)


@pytest.mark.parametrize("size", [64, 128, 256])
def test_generator_output_shape_contract(size):
    g = model.ColorizerGenerator(seed=24, base_width=4, heads=4,
                                 bottleneck_grid=size // 16)
    light = T.Tensor(_rand(1, 1, size, size, seed=25))
    noise = T.Tensor(model.sample_noise(np.random.default_rng(26), 1, size, 0.1))
    out, _ = g.forward(light, noise)
    assert out.shape == (1, 2, size, size)


def test_generator_full_gradient_census(gen, backbone):
    light = T.Tensor(_rand(2, 1, 64, 64, seed=27))
    noise = T.Tensor(model.sample_noise(np.random.default_rng(28), 2, 64, 0.1))
    target = T.Tensor(_rand(2, 2, 64, 64, seed=29, scale=0.3))
    out, _ = gen.forward(light, noise, backbone=backbone)
    T.reduce_mean(T.absolute(out - target)).backward()
    missing = [
        name
        for name, p in gen.params.items()
        if p.grad is None or np.linalg.norm(p.grad) == 0
    ]
    assert not missing, f"parameters without gradient: {missing}"
    T.zero_grads(gen.params)


def test_ablation_manifests():
    common = {"enc", "inject", "dec", "head"}

    def families(g):
        return {name.split(".")[0].rstrip("0123456789") for name in g.params}

    full = model.ColorizerGenerator(seed=1, base_width=8, heads=4)
    assert families(full) == common | {"color_enc", "fuse", "swin"}
    unet = model.ColorizerGenerator(seed=1, base_width=8, heads=4, ablation="unet")
    assert families(unet) == common
    no_ce = model.ColorizerGenerator(seed=1, base_width=8, heads=4,
                                     ablation="no_color_encoder")
    assert families(no_ce) == common | {"fuse", "swin"}
    no_ct = model.ColorizerGenerator(seed=1, base_width=8, heads=4,
                                     ablation="no_color_transformer")
    assert families(no_ct) == common | {"color_enc", "fuse"}
    with pytest.raises(ValueError):
        model.ColorizerGenerator(ablation="bogus")


def test_unet_ablation_matches_reference_unet():
    g = model.ColorizerGenerator(seed=30, base_width=8, heads=4, ablation="unet")
    light_arr = _rand(1, 1, 64, 64, seed=31)
    out, trace = g.forward(T.Tensor(light_arr))
    assert trace.output is trace.encoder_out
    assert trace.color_out is None and trace.fused is None

    # reference U-Net assembled directly from the same weights
    x = T.Tensor(light_arr)
    cin = 1
    skips = []
    for i in range(1, 5):
        w = g.params[f"enc{i}.w"]
        x = T.conv2d(x, T.Tensor(w.data[:, :cin].copy()), g.params[f"enc{i}.b"],
                     stride=2, pad=1)
        x = T.leaky_relu(x, 0.2)
        skips.append(x)
        cin = w.shape[0]
    for i in range(1, 5):
        x = T.concat_channels(x, skips[4 - i])
        x = T.upsample2x(x)
        x = T.conv2d(x, g.params[f"dec{i}.w"], g.params[f"dec{i}.b"], pad=1)
        x = T.leaky_relu(x, 0.2)
    x = T.tanh(T.conv2d(x, g.params["head.w"], g.params["head.b"]))
    np.testing.assert_allclose(out.data, x.data, rtol=1e-5, atol=1e-6)


# -- critic ---------------------------------------------------------------------------


def test_critic_patch_grid_and_alignment():
    c = model.PatchCritic(seed=32, base_width=8)
    light = T.Tensor(_rand(2, 1, 64, 64, seed=33))
    chroma = T.Tensor(_rand(2, 2, 64, 64, seed=34))
    scores = c.forward(light, chroma)
    assert scores.shape == (2, 1, 6, 6)
    with pytest.raises(ValueError):
        c.forward(light, T.Tensor(_rand(2, 2, 32, 32)))


def test_critic_constant_input_flat_interior_scores():
    c = model.PatchCritic(seed=35, base_width=8)
    stacked = T.Tensor(np.full((1, 3, 128, 128), 0.3, dtype=np.float32))
    scores = c.forward_stacked(stacked).data[0, 0]
    # weight sharing: patches whose receptive field avoids the padded border
    # see identical input, so their scores coincide exactly; only the rim of
    # the score map may deviate
    center = scores[5:9, 5:9]
    assert center.max() == center.min()
    assert np.isfinite(scores).all()
    rim = np.abs(scores - center[0, 0])
    assert rim[5:9, 5:9].max() == 0.0


def test_critic_zeroed_head_gives_bias():
    c = model.PatchCritic(seed=36, base_width=8)
    c.params["stage5.w"].data[:] = 0.0
    c.params["stage5.b"].data[:] = -1.25
    scores = c.forward_stacked(T.Tensor(_rand(2, 3, 64, 64, seed=37))).data
    np.testing.assert_array_equal(scores, np.full_like(scores, -1.25))


def test_critic_per_sample_independence():
    c = model.PatchCritic(seed=38, base_width=8)
    batch = _rand(3, 3, 64, 64, seed=39)
    full = c.forward_stacked(T.Tensor(batch)).data
    for i in range(3):
        solo = c.forward_stacked(T.Tensor(batch[i : i + 1])).data
        np.testing.assert_allclose(full[i : i + 1], solo, rtol=1e-6, atol=1e-7)


def test_critic_input_gradient_graph_matches_tape():
    c = model.PatchCritic(seed=40, base_width=8)
    stacked = T.Tensor(_rand(2, 3, 64, 64, seed=41), requires_grad=True)
    g_graph, scores = c.input_gradient(stacked)
    T.reduce_sum(scores).backward()
    np.testing.assert_allclose(g_graph.data, stacked.grad, rtol=1e-5, atol=1e-7)


# -- backbone ---------------------------------------------------------------------------


def test_backbone_frozen_and_deterministic(backbone):
    digest = backbone.weights_digest()
    rgb = T.Tensor(_rand(1, 3, 64, 64, seed=42))
    f1 = backbone.features(rgb, 3).data
    f2 = backbone.features(rgb, 3).data
    np.testing.assert_array_equal(f1, f2)
    # an optimizer sweep over backbone params must be a no-op (no grads exist)
    opt = T.Adam(lr=1.0)
    T.reduce_mean(T.square(backbone.features(rgb, 2))).backward()
    opt.step(backbone.params)
    assert backbone.weights_digest() == digest
    assert all(not p.requires_grad for p in backbone.params.values())


def test_backbone_tap_validation_and_shapes(backbone):
    rgb = T.Tensor(_rand(1, 3, 64, 64, seed=43))
    for tap, (ch, hw) in enumerate(zip((16, 32, 64, 64), (32, 16, 8, 4)), start=1):
        f = backbone.features(rgb, tap)
        assert f.shape == (1, ch, hw, hw)
    with pytest.raises(ValueError):
        backbone.features(rgb, 0)
    with pytest.raises(ValueError):
        backbone.features(rgb, 5)
    assert backbone.global_features(rgb).shape == (1, 64, 4, 4)


def test_backbone_gradient_reaches_input(backbone):
    a = T.Tensor(_rand(1, 3, 32, 32, seed=44), requires_grad=True)
    b = T.Tensor(_rand(1, 3, 32, 32, seed=45))
    diff = backbone.features(a, 3) - backbone.features(b, 3)
    T.reduce_mean(T.square(diff)).backward()
    assert a.grad is not None and np.linalg.norm(a.grad) > 0


def test_backbone_external_import(tmp_path, backbone):
    fresh = model.PerceptualBackbone(seed=99)
    path = tmp_path / "external.npz"
    np.savez(path, **{k: v.data for k, v in backbone.params.items()})
    fresh.load_external(path)
    assert fresh.weights_digest() == backbone.weights_digest()
    bad = {k: v.data for k, v in backbone.params.items()}
    bad.pop("stage1.w")
    np.savez(tmp_path / "missing.npz", **bad)
    with pytest.raises(KeyError):
        fresh.load_external(tmp_path / "missing.npz")
