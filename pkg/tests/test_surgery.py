"""Depth expansion and low-rank adapters: identity preservation, spec
validation, freeze mask accounting."""

import numpy as np
import pytest

from vitsurgery import rng
from vitsurgery.errors import SpecError, UsageError
from vitsurgery.model import (ViTConfig, build_vit, block_param_count, forward_logits,
                              head_param_count, param_count, replace_head)
from vitsurgery.peft import (AdapterSpec, ExpansionSpec, attach_lora, build_freeze_mask,
                             expand_blocks, merge_lora, random_probes, verify_identity)

TINY = ViTConfig(image_size=16, patch_size=8, dim=24, depth=4, heads=2, num_classes=5)


def _probes(cfg, n=4, seed=0):
    return random_probes(cfg, n, seed=seed)


# ---------------------------------------------------------------------------
# specs


def test_expansion_spec_placement():
    assert ExpansionSpec(1).placement(12) == [12]
    assert ExpansionSpec(2).placement(12) == [6, 12]
    assert ExpansionSpec(3).placement(12) == [4, 8, 12]
    assert ExpansionSpec(4).placement(12) == [3, 6, 9, 12]
    assert ExpansionSpec(4).placement(4) == [1, 2, 3, 4]


def test_expansion_spec_errors():
    with pytest.raises(SpecError):
        ExpansionSpec(0)
    with pytest.raises(SpecError):
        ExpansionSpec(5).validate(4)
    with pytest.raises(SpecError):
        ExpansionSpec(3).validate(4)


def test_adapter_spec():
    spec = AdapterSpec(8)
    assert spec.alpha == 8.0
    assert spec.scale == 1.0
    assert AdapterSpec(4, alpha=8.0).scale == 2.0
    with pytest.raises(SpecError):
        AdapterSpec(0)
    with pytest.raises(SpecError):
        AdapterSpec(4, alpha=-1.0)


# ---------------------------------------------------------------------------
# expansion


def test_expand_preserves_function_exactly():
    model = build_vit(TINY, seed=31)
    probes = _probes(TINY, seed=31)
    for p in (1, 2, 4):
        grown = expand_blocks(model, ExpansionSpec(p))
        assert grown.config.depth == TINY.depth + p
        assert verify_identity(model, grown, probes) == 0.0


def test_expand_depth_12_identity():
    cfg = ViTConfig(image_size=16, patch_size=8, dim=16, depth=12, heads=2, num_classes=3)
    model = build_vit(cfg, seed=32)
    grown = expand_blocks(model, 3)
    assert grown.config.depth == 15
    assert verify_identity(model, grown, _probes(cfg, seed=32)) == 0.0


def test_expand_origin_tags_and_zeroing():
    model = build_vit(TINY, seed=33)
    grown = expand_blocks(model, 2)
    assert grown.block_origin == ["original", "original", "expanded",
                                  "original", "original", "expanded"]
    for i, origin in enumerate(grown.block_origin):
        blk = grown.blocks[i]
        if origin == "expanded":
            assert not blk.out_w.data.any()
            assert not blk.out_b.data.any()
            assert not blk.down_w.data.any()
            assert not blk.down_b.data.any()
            # the rest is copied from the group's top block
            src = grown.blocks[i - 1]
            assert np.array_equal(blk.qkv_w.data, src.qkv_w.data)


def test_expand_is_pure():
    model = build_vit(TINY, seed=34)
    before = [t.data.copy() for t in model.parameters()]
    expand_blocks(model, 4)
    assert model.config.depth == TINY.depth
    for t, b in zip(model.parameters(), before):
        assert np.array_equal(t.data, b)


def test_expand_param_growth():
    model = build_vit(TINY, seed=35)
    grown = expand_blocks(model, 2)
    expect = param_count(model)["total"] + 2 * block_param_count(TINY)
    assert param_count(grown)["total"] == expect


# ---------------------------------------------------------------------------
# adapters


def test_lora_attach_identity_and_layout():
    model = build_vit(TINY, seed=36)
    adapted = attach_lora(model, AdapterSpec(4), seed=36)
    assert verify_identity(model, adapted, _probes(TINY, seed=36)) == 0.0
    d = TINY.dim
    for blk in adapted.blocks:
        assert blk.adapters.q.a.shape == (d, 4)
        assert blk.adapters.q.b.shape == (4, d)
        assert not blk.adapters.q.b.data.any()
        assert not blk.adapters.v.b.data.any()
        assert blk.adapters.q.a.data.any()  # seeded, not zero
    extra = param_count(adapted)["total"] - param_count(model)["total"]
    assert extra == TINY.depth * 4 * d * 4


def test_lora_double_attach_rejected():
    model = attach_lora(build_vit(TINY, seed=37), 4)
    with pytest.raises(UsageError):
        attach_lora(model, 4)


def test_lora_merge_round_trip():
    g = rng.generator(310)
    model = build_vit(TINY, seed=38)
    adapted = attach_lora(model, AdapterSpec(4, alpha=8.0), seed=38)
    # perturb the factors so the adapters actually do something
    for blk in adapted.blocks:
        for pair in (blk.adapters.q, blk.adapters.v):
            pair.a.data += g.normal(0, 0.05, size=pair.a.shape).astype(np.float32)
            pair.b.data += g.normal(0, 0.05, size=pair.b.shape).astype(np.float32)
    merged = merge_lora(adapted)
    assert merged.adapter_spec is None
    assert all(blk.adapters is None for blk in merged.blocks)
    probes = _probes(TINY, seed=38)
    assert verify_identity(adapted, merged, probes) <= 1e-5
    # and it genuinely differs from the pre-adapter model
    assert verify_identity(model, merged, probes) > 1e-4


def test_lora_merge_requires_adapters():
    with pytest.raises(UsageError):
        merge_lora(build_vit(TINY, seed=39))


def test_expand_after_lora_rejected():
    model = attach_lora(build_vit(TINY, seed=40), 2)
    with pytest.raises(UsageError):
        expand_blocks(model, 2)


# ---------------------------------------------------------------------------
# freeze masks


def _trainable(model, mask):
    return param_count(model, mask)["trainable"]


def test_mask_full_and_linear():
    model = build_vit(TINY, seed=41)
    total = param_count(model)["total"]
    assert _trainable(model, build_freeze_mask(model, "full")) == total
    linear = build_freeze_mask(model, "linear")
    assert _trainable(model, linear) == head_param_count(TINY)
    assert linear.tag == "linear"


def test_mask_top_k_counts():
    model = build_vit(TINY, seed=42)
    per_block = block_param_count(TINY)
    head = head_param_count(TINY)
    for k in range(1, TINY.depth + 1):
        mask = build_freeze_mask(model, "top_k", k=k)
        assert _trainable(model, mask) == k * per_block + head
        assert mask.tag == f"top_k({k})"
    # the final norm stays frozen
    mask = build_freeze_mask(model, "top_k", k=TINY.depth)
    assert not mask.flags["final_norm.gamma"]
    assert not mask.flags["pos_embed"]


def test_mask_top_k_selects_topmost():
    model = build_vit(TINY, seed=43)
    mask = build_freeze_mask(model, "top_k", k=1)
    last = TINY.depth - 1
    assert mask.flags[f"blocks.{last}.attn.qkv.weight"]
    assert not mask.flags["blocks.0.attn.qkv.weight"]


def test_mask_lora_only():
    model = attach_lora(build_vit(TINY, seed=44), AdapterSpec(8), seed=44)
    mask = build_freeze_mask(model, "lora_only")
    expect = TINY.depth * 4 * TINY.dim * 8 + head_param_count(TINY)
    assert _trainable(model, mask) == expect
    assert mask.flags["blocks.0.attn.lora_q.a"]
    assert not mask.flags["blocks.0.attn.qkv.weight"]


def test_mask_expanded_only():
    model = expand_blocks(build_vit(TINY, seed=45), 2)
    mask = build_freeze_mask(model, "expanded_only")
    expect = 2 * block_param_count(TINY) + head_param_count(TINY)
    assert _trainable(model, mask) == expect
    assert mask.flags["blocks.2.attn.qkv.weight"]
    assert not mask.flags["blocks.1.attn.qkv.weight"]


def test_mask_errors():
    model = build_vit(TINY, seed=46)
    with pytest.raises(UsageError):
        build_freeze_mask(model, "sparse")
    with pytest.raises(UsageError):
        build_freeze_mask(model, "top_k")
    with pytest.raises(UsageError):
        build_freeze_mask(model, "top_k", k=0)
    with pytest.raises(UsageError):
        build_freeze_mask(model, "top_k", k=TINY.depth + 1)
    with pytest.raises(UsageError):
        build_freeze_mask(model, "lora_only")
    with pytest.raises(UsageError):
        build_freeze_mask(model, "expanded_only")


# ---------------------------------------------------------------------------
# probes and identity checks


def test_random_probes_deterministic():
    a = random_probes(TINY, 3, seed=9)
    b = random_probes(TINY, 3, seed=9)
    assert a.shape == (3, TINY.channels, TINY.image_size, TINY.image_size)
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()
    with pytest.raises(UsageError):
        random_probes(TINY, 0)


def test_verify_identity_class_mismatch():
    a = build_vit(TINY, seed=47)
    b = replace_head(a, TINY.num_classes + 1, seed=47)
    with pytest.raises(UsageError):
        verify_identity(a, b, _probes(TINY))
