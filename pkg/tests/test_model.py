"""Model construction, forward pass, and parameter accounting.

The forward pass is checked against a from-scratch loop implementation
(tests/oracles.py) and the fast counters against a closed-form formula."""

import numpy as np
import pytest

from oracles import loop_count, loop_patchify, loop_vit_logits
from vitsurgery import rng
from vitsurgery.errors import ConfigError, ShapeError, UsageError
from vitsurgery.model import (VIT_B16, ViTConfig, build_vit, block_param_count,
                              extract_features, format_count, forward_features,
                              forward_logits, head_param_count, param_count,
                              parameter_shapes, patchify, replace_head)

TINY = ViTConfig(image_size=16, patch_size=8, dim=24, depth=2, heads=2, num_classes=5)


def _images(g, cfg, n, dtype=np.float32):
    return g.uniform(0, 1, size=(n, cfg.channels, cfg.image_size, cfg.image_size)).astype(dtype)


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    ViTConfig(image_size=32, patch_size=8, dim=64, depth=4, heads=4, num_classes=8)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=30, patch_size=8, dim=64, depth=4, heads=4, num_classes=8)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=32, patch_size=8, dim=66, depth=4, heads=4, num_classes=8)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=32, patch_size=8, dim=64, depth=0, heads=4, num_classes=8)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=32, patch_size=8, dim=64, depth=4, heads=4, num_classes=0)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=32, patch_size=8, dim=64, depth=4, heads=4, num_classes=8,
                  eps=0.0)


def test_derived_sizes():
    cfg = ViTConfig(**VIT_B16)
    assert cfg.num_patches == 196
    assert cfg.patch_dim == 768
    assert cfg.mlp_dim == 3072
    assert cfg.head_dim == 64


# ---------------------------------------------------------------------------
# parameter accounting


def test_vit_b16_exact_counts():
    cfg = ViTConfig(**VIT_B16)
    model = build_vit(cfg, seed=0)
    counts = param_count(model)
    assert counts["total"] == 85_875_556
    assert block_param_count(cfg) == 7_087_872
    assert head_param_count(cfg) == 76_900
    # last three blocks plus head, final norm excluded
    assert 3 * block_param_count(cfg) + head_param_count(cfg) == 21_340_516


def test_count_matches_formula_across_configs():
    g = rng.generator(301)
    for _ in range(20):
        heads = int(g.integers(1, 5))
        dim = heads * int(g.integers(2, 9))
        patch = int(g.integers(2, 7))
        cfg = ViTConfig(image_size=patch * int(g.integers(1, 4)), patch_size=patch,
                        dim=dim, depth=int(g.integers(1, 5)), heads=heads,
                        num_classes=int(g.integers(2, 30)),
                        channels=int(g.integers(1, 4)))
        model = build_vit(cfg, seed=int(g.integers(0, 1000)))
        assert param_count(model)["total"] == loop_count(cfg)
        shapes = parameter_shapes(cfg)
        assert sum(int(np.prod(s)) for _, s in shapes) == loop_count(cfg)


def test_named_parameters_match_declared_layout():
    model = build_vit(TINY, seed=3)
    names = [(n, t.shape) for n, t in model.named_parameters()]
    assert names == parameter_shapes(TINY)


def test_param_count_mask_split():
    model = build_vit(TINY, seed=3)
    flags = {name: name.startswith("head.") for name, _ in model.named_parameters()}

    class Mask:
        def __init__(self, flags):
            self.flags = flags

    counts = param_count(model, Mask(flags))
    assert counts["trainable"] == head_param_count(TINY)
    assert counts["total"] == param_count(model)["total"]
    with pytest.raises(UsageError):
        param_count(model, Mask({"nope": True}))


def test_format_count():
    assert format_count(85_875_556) == "85.9 M"
    assert format_count(76_900) == "76.9 K"
    assert format_count(7_087_872) == "7.1 M"
    assert format_count(999) == "999"
    assert format_count(21_340_516) == "21.3 M"
    assert format_count(371_812) == "371.8 K"


# ---------------------------------------------------------------------------
# forward pass against the loop oracle


def test_patchify_geometry():
    # 1 channel, 4x4 image, 2x2 patches: row-major patch grid, then
    # channel-major pixels within a patch
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    got = patchify(img, 2).data
    assert got.shape == (4, 4)
    assert np.array_equal(got[0], [0, 1, 4, 5])
    assert np.array_equal(got[1], [2, 3, 6, 7])
    assert np.array_equal(got[2], [8, 9, 12, 13])
    assert np.array_equal(got[3], [10, 11, 14, 15])
    assert np.array_equal(loop_patchify(img, 2), got)
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 5, 5), dtype=np.float32), 2)
    with pytest.raises(ShapeError):
        patchify(np.zeros((4, 4), dtype=np.float32), 2)


def test_patchify_matches_loop_random():
    g = rng.generator(302)
    for _ in range(5):
        img = g.uniform(-1, 1, size=(3, 12, 12)).astype(np.float32)
        assert np.array_equal(patchify(img, 4).data, loop_patchify(img, 4))


def test_forward_matches_loop_oracle_f32():
    g = rng.generator(303)
    model = build_vit(TINY, seed=11)
    images = _images(g, TINY, 4)
    got = forward_logits(model, images).data
    want = loop_vit_logits(model, images)
    assert got.shape == (4, TINY.num_classes)
    assert np.max(np.abs(got.astype(np.float64) - want)) <= 1e-5


def test_forward_matches_loop_oracle_f64():
    g = rng.generator(304)
    model = build_vit(TINY, seed=12, dtype=np.float64)
    images = _images(g, TINY, 3, dtype=np.float64)
    got = forward_logits(model, images).data
    want = loop_vit_logits(model, images)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_batch_order_equivariance():
    g = rng.generator(305)
    model = build_vit(TINY, seed=13)
    images = _images(g, TINY, 6)
    full = forward_logits(model, images).data
    perm = np.array([5, 2, 0, 4, 1, 3])
    shuffled = forward_logits(model, images[perm]).data
    assert np.array_equal(full[perm], shuffled)


def test_forward_features_width():
    model = build_vit(TINY, seed=14)
    g = rng.generator(306)
    feats = forward_features(model, _images(g, TINY, 2))
    assert feats.shape == (2, TINY.dim)


def test_extract_features_batching_consistent():
    model = build_vit(TINY, seed=15)
    g = rng.generator(307)
    images = _images(g, TINY, 7)
    a = extract_features(model, images, batch_size=3)
    b = extract_features(model, images, batch_size=7)
    assert a.shape == (7, TINY.dim)
    assert np.array_equal(a, b)


def test_batch_shape_rejected():
    model = build_vit(TINY, seed=16)
    with pytest.raises(ShapeError):
        forward_logits(model, np.zeros((2, 3, 8, 8), dtype=np.float32))


# ---------------------------------------------------------------------------
# head replacement and determinism


def test_replace_head():
    model = build_vit(TINY, seed=17)
    body_before = model.patch_w.data.copy()
    swapped = replace_head(model, 9, seed=18)
    assert swapped.config.num_classes == 9
    assert swapped.head_w.shape == (TINY.dim, 9)
    assert swapped.head_b.shape == (9,)
    assert np.allclose(swapped.head_b.data, 0)
    assert np.array_equal(swapped.patch_w.data, body_before)
    # original untouched
    assert model.config.num_classes == TINY.num_classes


def test_build_determinism():
    a = build_vit(TINY, seed=21)
    b = build_vit(TINY, seed=21)
    c = build_vit(TINY, seed=22)
    for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert ta.data.tobytes() == tb.data.tobytes()
    assert a.patch_w.data.tobytes() != c.patch_w.data.tobytes()


def test_clone_is_deep():
    model = build_vit(TINY, seed=23)
    twin = model.clone()
    twin.head_w.data[0, 0] += 1.0
    assert model.head_w.data[0, 0] != twin.head_w.data[0, 0]
    assert twin.block_origin == model.block_origin
