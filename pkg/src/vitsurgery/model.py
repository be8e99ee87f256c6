"""Configurable Vision Transformer with exact parameter accounting.

The model is a plain container of named parameter tensors; the forward
pass is built functionally on the autodiff ops.  Layout (and therefore
checkpoint manifest order) is fixed: patch embedding, class token,
positional embedding, blocks in order (each: ln1, fused qkv, attention
output projection, ln2, MLP up/down, then any adapter matrices), final
norm, classifier head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import rng
from .errors import ConfigError, ShapeError, UsageError
from .tensor import (F32, Tensor, add, broadcast_leading, concat, gelu, layer_norm,
                     matmul, no_grad, reshape, scale, seeded_normal, slice_axis,
                     softmax, tensor, transpose, zeros)

ORIGINAL = "original"
EXPANDED = "expanded"

INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    dim: int
    depth: int
    heads: int
    num_classes: int
    channels: int = 3
    mlp_ratio: int = 4
    eps: float = 1e-6

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


# the canonical ViT-B/16 layout with the 100-class head used for accounting checks
VIT_B16 = dict(image_size=224, patch_size=16, dim=768, depth=12, heads=12, num_classes=100)


@dataclass
class LoraPair:
    """Low-rank factors for one attention target: x @ a @ b, scaled."""
    a: Tensor  # [dim, r]
    b: Tensor  # [r, dim]


@dataclass
class BlockAdapters:
    q: LoraPair
    v: LoraPair
    scale: float  # alpha / r


@dataclass
class TransformerBlock:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    qkv_w: Tensor  # [dim, 3*dim], column order Q, K, V
    qkv_b: Tensor
    out_w: Tensor  # [dim, dim]
    out_b: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    up_w: Tensor   # [dim, mlp_dim]
    up_b: Tensor
    down_w: Tensor  # [mlp_dim, dim]
    down_b: Tensor
    adapters: BlockAdapters | None = None


@dataclass
class ViTModel:
    config: ViTConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list
    block_origin: list
    final_gamma: Tensor
    final_beta: Tensor
    head_w: Tensor
    head_b: Tensor
    adapter_spec: object = None    # set by attach_lora, cleared by merge_lora
    expansion_spec: object = None  # set by expand_blocks
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.patch_w.dtype

    def named_parameters(self):
        """All parameter tensors in canonical (manifest) order."""
        out = [("patch_embed.weight", self.patch_w), ("patch_embed.bias", self.patch_b),
               ("cls_token", self.cls_token), ("pos_embed", self.pos_embed)]
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            out += [(p + "ln1.gamma", blk.ln1_gamma), (p + "ln1.beta", blk.ln1_beta),
                    (p + "attn.qkv.weight", blk.qkv_w), (p + "attn.qkv.bias", blk.qkv_b),
                    (p + "attn.out.weight", blk.out_w), (p + "attn.out.bias", blk.out_b),
                    (p + "ln2.gamma", blk.ln2_gamma), (p + "ln2.beta", blk.ln2_beta),
                    (p + "mlp.up.weight", blk.up_w), (p + "mlp.up.bias", blk.up_b),
                    (p + "mlp.down.weight", blk.down_w), (p + "mlp.down.bias", blk.down_b)]
            if blk.adapters is not None:
                out += [(p + "attn.lora_q.a", blk.adapters.q.a), (p + "attn.lora_q.b", blk.adapters.q.b),
                        (p + "attn.lora_v.a", blk.adapters.v.a), (p + "attn.lora_v.b", blk.adapters.v.b)]
        out += [("final_norm.gamma", self.final_gamma), ("final_norm.beta", self.final_beta),
                ("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_dict(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def clone(self) -> "ViTModel":
        """Deep copy; transformations stay pure by cloning first."""
        def cp(t):
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        blocks = []
        for blk in self.blocks:
            adapters = None
            if blk.adapters is not None:
                adapters = BlockAdapters(q=LoraPair(cp(blk.adapters.q.a), cp(blk.adapters.q.b)),
                                         v=LoraPair(cp(blk.adapters.v.a), cp(blk.adapters.v.b)),
                                         scale=blk.adapters.scale)
            blocks.append(TransformerBlock(
                cp(blk.ln1_gamma), cp(blk.ln1_beta), cp(blk.qkv_w), cp(blk.qkv_b),
                cp(blk.out_w), cp(blk.out_b), cp(blk.ln2_gamma), cp(blk.ln2_beta),
                cp(blk.up_w), cp(blk.up_b), cp(blk.down_w), cp(blk.down_b), adapters))
        return ViTModel(config=self.config, patch_w=cp(self.patch_w), patch_b=cp(self.patch_b),
                        cls_token=cp(self.cls_token), pos_embed=cp(self.pos_embed),
                        blocks=blocks, block_origin=list(self.block_origin),
                        final_gamma=cp(self.final_gamma), final_beta=cp(self.final_beta),
                        head_w=cp(self.head_w), head_b=cp(self.head_b),
                        adapter_spec=self.adapter_spec, expansion_spec=self.expansion_spec,
                        extra=dict(self.extra))


def parameter_shapes(config: ViTConfig, lora_rank: int | None = None):
    """Named parameter shapes for a layout, without allocating anything.

    Backs the fast counting paths and checkpoint validation; must stay in
    lockstep with ViTModel.named_parameters().
    """
    d, m = config.dim, config.mlp_dim
    shapes = [("patch_embed.weight", (config.patch_dim, d)), ("patch_embed.bias", (d,)),
              ("cls_token", (d,)), ("pos_embed", (1 + config.num_patches, d))]
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes += [(p + "ln1.gamma", (d,)), (p + "ln1.beta", (d,)),
                   (p + "attn.qkv.weight", (d, 3 * d)), (p + "attn.qkv.bias", (3 * d,)),
                   (p + "attn.out.weight", (d, d)), (p + "attn.out.bias", (d,)),
                   (p + "ln2.gamma", (d,)), (p + "ln2.beta", (d,)),
                   (p + "mlp.up.weight", (d, m)), (p + "mlp.up.bias", (m,)),
                   (p + "mlp.down.weight", (m, d)), (p + "mlp.down.bias", (d,))]
        if lora_rank is not None:
            shapes += [(p + "attn.lora_q.a", (d, lora_rank)), (p + "attn.lora_q.b", (lora_rank, d)),
                       (p + "attn.lora_v.a", (d, lora_rank)), (p + "attn.lora_v.b", (lora_rank, d))]
    shapes += [("final_norm.gamma", (d,)), ("final_norm.beta", (d,)),
               ("head.weight", (d, config.num_classes)), ("head.bias", (config.num_classes,))]
    return shapes


def block_param_count(config: ViTConfig) -> int:
    """Scalars in one transformer block (no adapters)."""
    d, m = config.dim, config.mlp_dim
    return 3 * d * d + 3 * d + d * d + d + d * m + m + m * d + d + 4 * d


def head_param_count(config: ViTConfig) -> int:
    return config.dim * config.num_classes + config.num_classes


def build_vit(config: ViTConfig, seed: int, dtype=F32) -> ViTModel:
    """Allocate a model: Xavier-scaled weight matrices, N(0, 0.02) embedding
    tables, biases/betas 0, gammas 1.

    Each tensor draws from a stream derived from (seed, its name), so the
    result is deterministic per seed and insensitive to allocation order.
    Fan-based scaling matters at small widths: a flat std leaves the forward
    signal so weak that SGD sits on a long plateau before anything trains.
    """
    d = config.dim

    def w(name, shape):
        std = math.sqrt(2.0 / (shape[0] + shape[1])) if len(shape) == 2 else INIT_STD
        return seeded_normal(shape, rng.derive_seed(seed, name), std=std,
                             dtype=dtype, requires_grad=True)

    def z(shape):
        return zeros(shape, dtype=dtype, requires_grad=True)

    def one(shape):
        t = zeros(shape, dtype=dtype, requires_grad=True)
        t.data += 1
        return t

    blocks = []
    for i in range(config.depth):
        p = f"blocks.{i}."
        blocks.append(TransformerBlock(
            ln1_gamma=one((d,)), ln1_beta=z((d,)),
            qkv_w=w(p + "attn.qkv.weight", (d, 3 * d)), qkv_b=z((3 * d,)),
            out_w=w(p + "attn.out.weight", (d, d)), out_b=z((d,)),
            ln2_gamma=one((d,)), ln2_beta=z((d,)),
            up_w=w(p + "mlp.up.weight", (d, config.mlp_dim)), up_b=z((config.mlp_dim,)),
            down_w=w(p + "mlp.down.weight", (config.mlp_dim, d)), down_b=z((d,))))
    return ViTModel(
        config=config,
        patch_w=w("patch_embed.weight", (config.patch_dim, d)), patch_b=z((d,)),
        cls_token=w("cls_token", (d,)),
        pos_embed=seeded_normal((1 + config.num_patches, d), rng.derive_seed(seed, "pos_embed"),
                                std=INIT_STD, dtype=dtype, requires_grad=True),
        blocks=blocks, block_origin=[ORIGINAL] * config.depth,
        final_gamma=one((d,)), final_beta=z((d,)),
        head_w=w("head.weight", (d, config.num_classes)), head_b=z((config.num_classes,)))


def replace_head(model: ViTModel, num_classes: int, seed: int) -> ViTModel:
    """Clone the model with a freshly initialized classifier head."""
    out = model.clone()
    out.config = replace(model.config, num_classes=num_classes)
    std = math.sqrt(2.0 / (model.config.dim + num_classes))
    out.head_w = seeded_normal((model.config.dim, num_classes), rng.derive_seed(seed, "head.weight"),
                               std=std, dtype=model.dtype, requires_grad=True)
    out.head_b = zeros((num_classes,), dtype=model.dtype, requires_grad=True)
    return out


# ---------------------------------------------------------------------------
# forward


def _patchify_array(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[..., C, H, W] -> [..., num_patches, patch_size^2 * C].

    Patches are ordered row-major over the grid; each patch is flattened
    channel-major, then row-major within the channel plane.
    """
    *lead, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(*lead, c, gh, patch_size, gw, patch_size)
    n = len(lead)
    x = np.transpose(x, tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4))
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch_size * patch_size * c))


def patchify(image, patch_size: int) -> Tensor:
    """Tokenize one [C, H, W] image into flattened patches."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ShapeError(f"patchify expects [channels, H, W], got shape {tuple(arr.shape)}")
    return Tensor(_patchify_array(arr, patch_size))


def _batch_tokens(model: ViTModel, batch) -> Tensor:
    cfg = model.config
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim != 4 or arr.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"batch shape {tuple(arr.shape)} does not match [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}]")
    patches = Tensor(_patchify_array(arr.astype(model.dtype, copy=False), cfg.patch_size))
    b = arr.shape[0]
    x = add(matmul(patches, model.patch_w), model.patch_b)          # [B, N, d]
    cls = broadcast_leading(reshape(model.cls_token, (1, cfg.dim)), b)  # [B, 1, d]
    x = concat([cls, x], axis=1)                                    # [B, N+1, d]
    return add(x, model.pos_embed)


def _block_forward(x: Tensor, blk: TransformerBlock, cfg: ViTConfig) -> Tensor:
    b, t, d = x.shape
    h, dh = cfg.heads, cfg.head_dim

    normed = layer_norm(x, blk.ln1_gamma, blk.ln1_beta, cfg.eps)
    qkv = add(matmul(normed, blk.qkv_w), blk.qkv_b)                 # [B, T, 3d]
    q = slice_axis(qkv, 2, 0, d)
    k = slice_axis(qkv, 2, d, 2 * d)
    v = slice_axis(qkv, 2, 2 * d, 3 * d)
    if blk.adapters is not None:
        ad = blk.adapters
        q = add(q, scale(matmul(matmul(normed, ad.q.a), ad.q.b), ad.scale))
        v = add(v, scale(matmul(matmul(normed, ad.v.a), ad.v.b), ad.scale))

    def to_heads(z):
        return transpose(reshape(z, (b, t, h, dh)), (0, 2, 1, 3))   # [B, h, T, dh]

    qh, kh, vh = to_heads(q), to_heads(k), to_heads(v)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)                                          # [B, h, T, dh]
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    x = add(x, add(matmul(ctx, blk.out_w), blk.out_b))

    normed2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta, cfg.eps)
    hidden = gelu(add(matmul(normed2, blk.up_w), blk.up_b))
    return add(x, add(matmul(hidden, blk.down_w), blk.down_b))


def forward_features(model: ViTModel, batch) -> Tensor:
    """Post-final-norm class-token embedding, [B, dim]; head not applied."""
    x = _batch_tokens(model, batch)
    for blk in model.blocks:
        x = _block_forward(x, blk, model.config)
    x = layer_norm(x, model.final_gamma, model.final_beta, model.config.eps)
    cls = slice_axis(x, 1, 0, 1)
    return reshape(cls, (x.shape[0], model.config.dim))


def forward_logits(model: ViTModel, batch) -> Tensor:
    feats = forward_features(model, batch)
    return add(matmul(feats, model.head_w), model.head_b)


def extract_features(model: ViTModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Evaluation-only feature extraction, batched, no graph recording."""
    chunks = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            chunks.append(forward_features(model, images[lo:lo + batch_size]).data)
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# accounting


def param_count(model: ViTModel, mask=None) -> dict:
    """Exact {total, trainable} scalar counts; trainable == total without a mask."""
    named = model.named_parameters()
    total = sum(t.size for _, t in named)
    if mask is None:
        return {"total": total, "trainable": total}
    names = {name for name, _ in named}
    if set(mask.flags) != names:
        missing = names ^ set(mask.flags)
        raise UsageError(f"mask does not cover the model's parameters (mismatch on {sorted(missing)[:3]}...)")
    trainable = sum(t.size for name, t in named if mask.flags[name])
    return {"total": total, "trainable": trainable}


def format_count(n: int) -> str:
    """Render a parameter count the way comparison tables do: '85.9 M', '76.9 K'."""
    n = int(n)
    if n >= 10**6:
        q = (Decimal(n) / Decimal(10**6)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
        return f"{q} M"
    if n >= 10**3:
        q = (Decimal(n) / Decimal(10**3)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
        return f"{q} K"
    return str(n)
