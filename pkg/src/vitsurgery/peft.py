"""Model surgery: block expansion, low-rank adapters, freeze masks.

Every transformation here is pure: it clones the input model, edits the
clone, and returns it.  Each one preserves the function the network
computes at the moment of surgery, which verify_identity checks to the
bit (max abs logit difference must be exactly zero).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .errors import SpecError, UsageError
from .model import (EXPANDED, INIT_STD, BlockAdapters, LoraPair, TransformerBlock,
                    ViTModel, forward_logits)
from .tensor import Tensor, no_grad, seeded_normal, zeros


@dataclass(frozen=True)
class ExpansionSpec:
    """Insert p identity blocks, one after each of p equal groups."""
    p: int

    def __post_init__(self):
        if self.p < 1:
            raise SpecError(f"expansion count p must be >= 1, got {self.p}")

    def placement(self, depth: int):
        """1-indexed original positions the new blocks are inserted after."""
        self.validate(depth)
        m = depth // self.p
        return [m * (g + 1) for g in range(self.p)]

    def validate(self, depth: int):
        if self.p > depth:
            raise SpecError(f"p={self.p} exceeds depth {depth}")
        if depth % self.p != 0:
            raise SpecError(f"depth {depth} is not divisible by p={self.p}")


@dataclass(frozen=True)
class AdapterSpec:
    """Low-rank factors on the attention Q and V projections."""
    r: int
    alpha: float | None = None
    init_std: float = INIT_STD

    def __post_init__(self):
        if self.r < 1:
            raise SpecError(f"adapter rank must be >= 1, got {self.r}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.r))
        if not self.alpha > 0:
            raise SpecError(f"adapter alpha must be > 0, got {self.alpha}")

    @property
    def scale(self) -> float:
        return self.alpha / self.r


def _copy_block(blk: TransformerBlock) -> TransformerBlock:
    def cp(t):
        return Tensor(t.data.copy(), requires_grad=t.requires_grad)
    if blk.adapters is not None:
        raise UsageError("expand a model before attaching adapters, not after")
    return TransformerBlock(cp(blk.ln1_gamma), cp(blk.ln1_beta), cp(blk.qkv_w), cp(blk.qkv_b),
                            cp(blk.out_w), cp(blk.out_b), cp(blk.ln2_gamma), cp(blk.ln2_beta),
                            cp(blk.up_w), cp(blk.up_b), cp(blk.down_w), cp(blk.down_b))


def expand_blocks(model: ViTModel, spec) -> ViTModel:
    """Grow depth from N to N + p without changing the computed function.

    The N blocks are split into p groups of N/p.  After each group a copy
    of that group's topmost block is inserted, with its attention output
    projection and MLP down projection (weights and biases) zeroed, so the
    new block is an exact residual pass-through until training moves it.
    """
    if not isinstance(spec, ExpansionSpec):
        spec = ExpansionSpec(int(spec))
    depth = model.config.depth
    spec.validate(depth)
    out = model.clone()
    group = depth // spec.p
    blocks, origin = [], []
    for g in range(spec.p):
        chunk = out.blocks[g * group:(g + 1) * group]
        blocks.extend(chunk)
        origin.extend(out.block_origin[g * group:(g + 1) * group])
        fresh = _copy_block(chunk[-1])
        fresh.out_w.data[:] = 0
        fresh.out_b.data[:] = 0
        fresh.down_w.data[:] = 0
        fresh.down_b.data[:] = 0
        blocks.append(fresh)
        origin.append(EXPANDED)
    out.blocks = blocks
    out.block_origin = origin
    out.config = replace(model.config, depth=depth + spec.p)
    out.expansion_spec = spec
    return out


def attach_lora(model: ViTModel, spec, seed: int = 0) -> ViTModel:
    """Add low-rank factors on the Q and V projections of every block.

    a ~ N(0, init_std), b = 0, applied as x @ a @ b scaled by alpha/r, so
    attachment leaves the forward pass bit-identical.
    """
    if not isinstance(spec, AdapterSpec):
        spec = AdapterSpec(int(spec))
    if any(blk.adapters is not None for blk in model.blocks):
        raise UsageError("model already carries adapters; merge them first")
    out = model.clone()
    d = model.config.dim
    for i, blk in enumerate(out.blocks):
        def pair(target):
            a = seeded_normal((d, spec.r), rng.derive_seed(seed, f"blocks.{i}.attn.lora_{target}.a"),
                              std=spec.init_std, dtype=model.dtype, requires_grad=True)
            b = zeros((spec.r, d), dtype=model.dtype, requires_grad=True)
            return LoraPair(a, b)
        blk.adapters = BlockAdapters(q=pair("q"), v=pair("v"), scale=spec.scale)
    out.adapter_spec = spec
    return out


def merge_lora(model: ViTModel) -> ViTModel:
    """Fold adapters into the fused qkv weights and drop them.

    Q columns gain scale * a_q @ b_q, V columns gain scale * a_v @ b_v;
    the merged model has the plain layout and computes the same function
    as the adapted one (up to rounding of the refactored product).
    """
    if all(blk.adapters is None for blk in model.blocks):
        raise UsageError("model has no adapters to merge")
    out = model.clone()
    d = model.config.dim
    for blk in out.blocks:
        ad = blk.adapters
        if ad is None:
            continue
        blk.qkv_w.data[:, 0:d] += ad.scale * (ad.q.a.data @ ad.q.b.data)
        blk.qkv_w.data[:, 2 * d:3 * d] += ad.scale * (ad.v.a.data @ ad.v.b.data)
        blk.adapters = None
    out.adapter_spec = None
    return out


# ---------------------------------------------------------------------------
# freeze masks

MASK_KINDS = ("full", "linear", "top_k", "lora_only", "expanded_only")


@dataclass
class FreezeMask:
    """Per-parameter trainability flags; True means the optimizer may touch it."""
    kind: str
    flags: dict
    k: int | None = None

    @property
    def tag(self) -> str:
        return f"top_k({self.k})" if self.kind == "top_k" else self.kind

    def trainable_names(self):
        return [n for n, v in self.flags.items() if v]


def build_freeze_mask(model: ViTModel, kind: str, k: int | None = None) -> FreezeMask:
    """Trainability masks for the supported tuning strategies.

    full          everything
    linear        classifier head only
    top_k         the k topmost blocks plus the head (requires k)
    lora_only     adapter factors plus the head
    expanded_only blocks inserted by expansion plus the head
    """
    if kind not in MASK_KINDS:
        raise UsageError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    names = [n for n, _ in model.named_parameters()]
    flags = {n: False for n in names}

    def enable(pred):
        for n in names:
            if pred(n):
                flags[n] = True

    if kind == "full":
        enable(lambda n: True)
    elif kind == "linear":
        enable(lambda n: n.startswith("head."))
    elif kind == "top_k":
        depth = model.config.depth
        if k is None:
            raise UsageError("top_k mask requires k")
        if not 1 <= k <= depth:
            raise UsageError(f"top_k k={k} outside [1, {depth}]")
        top = tuple(f"blocks.{i}." for i in range(depth - k, depth))
        enable(lambda n: n.startswith("head.") or n.startswith(top))
    elif kind == "lora_only":
        if all(blk.adapters is None for blk in model.blocks):
            raise UsageError("lora_only mask requires attached adapters")
        enable(lambda n: n.startswith("head.") or ".lora_" in n)
    else:  # expanded_only
        if EXPANDED not in model.block_origin:
            raise UsageError("expanded_only mask requires an expanded model")
        grown = tuple(f"blocks.{i}." for i, o in enumerate(model.block_origin) if o == EXPANDED)
        enable(lambda n: n.startswith("head.") or n.startswith(grown))
    return FreezeMask(kind=kind, flags=flags, k=k if kind == "top_k" else None)


def random_probes(config, n: int, seed: int = 0) -> np.ndarray:
    """Seeded uniform probe images shaped for the given model."""
    if n < 1:
        raise UsageError(f"need at least one probe, got {n}")
    g = rng.generator(rng.derive_seed(seed, "identity-probes"))
    shape = (n, config.channels, config.image_size, config.image_size)
    return g.uniform(0.0, 1.0, size=shape).astype(np.float32)


def verify_identity(model_a: ViTModel, model_b: ViTModel, batch) -> float:
    """Max abs difference between the two models' logits on one batch.

    Surgery that claims to preserve the function must return exactly 0.0
    here (the zeroed projections multiply to true zeros, and x + 0 == x
    in IEEE arithmetic for finite x).
    """
    if model_a.config.num_classes != model_b.config.num_classes:
        raise UsageError("models disagree on class count; logits are not comparable")
    with no_grad():
        la = forward_logits(model_a, batch).data
        lb = forward_logits(model_b, batch).data
    return float(np.max(np.abs(la - lb)))
