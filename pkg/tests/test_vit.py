import numpy as np
import pytest

from mixq import tensor as T
from mixq.quant import CalibrationStats, calibrate_uniform
from mixq.tensor import ShapeError, Tape
from mixq.vit import (
    BLOCK_KINDS, LayerId, LayerKind, ModelConfig, QuantPlan, SiteQuant, forward,
    init_weights, layer_registry, param_names, patchify, predict_logits, registry_ids,
)

# regenerated from a double-precision run of this implementation
GOLDEN = np.array([
    [4.325338030043968, 1.0780737002579737, -3.0119289603867765, -0.08929527657093117],
    [-2.1277524661094036, 0.46644916393548197, -1.5087537461514997, -4.036004263364371],
])


def test_init_is_deterministic(small_config):
    a, b = init_weights(small_config), init_weights(small_config)
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_init_depends_on_seed(small_config):
    from dataclasses import replace
    a = init_weights(small_config)
    b = init_weights(replace(small_config, seed=4))
    assert any(not np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_qkv_shape(small_model):
    assert small_model.weights["blocks.0.qkv.W"].shape == (16, 48)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(image_height=30, patch_size=4)
    with pytest.raises(ValueError):
        ModelConfig(classes=1)


def test_layer_id_round_trip():
    for lid in registry_ids(ModelConfig(num_blocks=2)):
        assert LayerId.parse(str(lid)) == lid
    with pytest.raises(ValueError):
        LayerId(1, LayerKind.HEAD)


def test_registry_counts():
    # 68x4 images with 4x4 patches give N = 17 tokens
    cfg = ModelConfig(num_blocks=1, embed_dim=16, heads=2, mlp_dim=32, classes=4,
                      patch_size=4, image_height=68, image_width=4)
    assert cfg.tokens == 17
    reg = {info.layer.kind: info for info in layer_registry(cfg)}
    assert reg[LayerKind.FC1].params == 16 * 32 + 32 == 544
    assert reg[LayerKind.MATMUL1].params == 0
    assert reg[LayerKind.QKV].macs == 17 * 16 * 48 == 13056
    for kind in (LayerKind.MATMUL1, LayerKind.MATMUL2, LayerKind.POST_SOFTMAX,
                 LayerKind.POST_GELU):
        assert reg[kind].params == 0


def test_registry_order_and_size(small_config):
    ids = [info.layer for info in layer_registry(small_config)]
    assert ids[0].kind is LayerKind.PATCH_EMBED and ids[-1].kind is LayerKind.HEAD
    assert len(ids) == 2 + small_config.num_blocks * len(BLOCK_KINDS)
    assert len(set(ids)) == len(ids)


def test_registry_params_match_weight_tensors(small_model):
    for info in layer_registry(small_model):
        names = param_names(info.layer)
        if names is None:
            continue
        assert info.params == sum(small_model.weights[n].size for n in names)


def test_patchify_layout():
    img = np.arange(2 * 4 * 4 * 1, dtype=float).reshape(2, 4, 4, 1)
    p = patchify(img, 2)
    assert p.shape == (2, 4, 4)
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])


def test_zero_weight_residual_path(small_model, small_images):
    zeroed = {k: np.zeros_like(v) for k, v in small_model.weights.items()
              if any(s in k for s in ("qkv.", "proj.", "fc1.", "fc2."))}
    model = small_model.with_weights(zeroed)
    w = model.weights
    x = patchify(small_images, 4) @ w["patch_embed.W"] + w["patch_embed.b"] + w["pos_embed"]
    expect = x.mean(axis=1) @ w["head.W"] + w["head.b"]
    np.testing.assert_allclose(forward(model, small_images).logits.data, expect,
                               rtol=1e-13, atol=1e-13)


def test_attention_rows_sum_to_one(small_model, small_images):
    res = forward(small_model, small_images, capture=True)
    for l in range(2):
        attn = res.cache[str(LayerId(l, LayerKind.POST_SOFTMAX))].data
        assert attn.shape == (5, 2, 4, 4)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_golden_logits(small_model, small_images):
    np.testing.assert_allclose(forward(small_model, small_images[:2]).logits.data, GOLDEN,
                               rtol=1e-12, atol=1e-12)


def test_empty_entries_equal_empty_plan(small_model, small_images):
    plan = QuantPlan({lid: SiteQuant() for lid in registry_ids(small_model.config)})
    a = forward(small_model, small_images).logits.data
    b = forward(small_model, small_images, plan).logits.data
    assert np.array_equal(a, b)


def test_capture_does_not_change_logits(small_model, small_images):
    a = forward(small_model, small_images).logits.data
    b = forward(small_model, small_images, capture=True).logits.data
    assert np.array_equal(a, b)


def test_batch_permutation(small_model, small_images):
    perm = np.array([3, 0, 4, 1, 2])
    a = forward(small_model, small_images).logits.data
    b = forward(small_model, small_images[perm]).logits.data
    np.testing.assert_allclose(b, a[perm], rtol=1e-13, atol=1e-13)


def test_predict_logits_batches(small_model, small_images):
    a = forward(small_model, small_images).logits.data
    np.testing.assert_allclose(predict_logits(small_model, small_images, batch_size=2), a,
                               rtol=1e-13, atol=1e-13)


def test_plan_with_unknown_layer(small_model, small_images):
    with pytest.raises(KeyError):
        forward(small_model, small_images, QuantPlan({LayerId(7, LayerKind.QKV): SiteQuant()}))


def test_bad_image_shape(small_model):
    with pytest.raises(ShapeError):
        forward(small_model, np.zeros((1, 9, 8, 3)))


def test_quantized_plan_changes_logits(small_model, small_images):
    lid = LayerId(0, LayerKind.QKV)
    w = small_model.weights["blocks.0.qkv.W"]
    plan = QuantPlan({lid: SiteQuant(weight=calibrate_uniform(CalibrationStats(w.ravel()), 2))})
    a = forward(small_model, small_images).logits.data
    b = forward(small_model, small_images, plan).logits.data
    assert not np.array_equal(a, b)
    assert QuantPlan.from_dict(plan.to_dict()).to_dict() == plan.to_dict()


def test_logit_gradient_matches_finite_differences(small_model, small_images):
    x = small_images[:2]
    seed = np.random.default_rng(0).normal(size=(2, 4))
    with Tape() as tape:
        res = forward(small_model, x, track=True)
        out = (res.logits * T.Tensor(seed)).sum()
    grads = tape.backward(out)
    for name in ("blocks.1.fc1.W", "blocks.0.qkv.b", "pos_embed", "blocks.0.ln1.gamma"):
        w0 = small_model.weights[name]
        analytic = grads[res.params[name]]
        rng = np.random.default_rng(1)
        for idx in [tuple(rng.integers(0, n) for n in w0.shape) for _ in range(4)]:
            def f(v):
                w = w0.copy()
                w[idx] = v
                m = small_model.with_weights({name: w})
                return float(np.sum(forward(m, x).logits.data * seed))
            h = 1e-5
            fd = (f(w0[idx] + h) - f(w0[idx] - h)) / (2 * h)
            assert abs(analytic[idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)
