"""Single-file binary checkpoints.

Layout: 4-byte magic "PVIT", u32 little-endian format version, u64
little-endian manifest length, UTF-8 JSON manifest, then every parameter
tensor's raw little-endian float32 data concatenated in manifest order.
The manifest is serialized with sorted keys and no whitespace, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, UsageError, VersionError
from .model import ORIGINAL, ViTConfig, ViTModel, BlockAdapters, LoraPair, TransformerBlock, parameter_shapes
from .peft import AdapterSpec, ExpansionSpec, FreezeMask, build_freeze_mask
from .tensor import F32, Tensor

MAGIC = b"PVIT"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _mask_meta(mask: FreezeMask | None) -> dict | None:
    if mask is None:
        return None
    return {"kind": mask.kind, "k": mask.k}


def save_checkpoint(model: ViTModel, mask: FreezeMask | None, path: str) -> None:
    """Write the model (and its trainability mask) to one binary file."""
    if model.dtype != F32:
        raise UsageError(f"checkpoints store float32 models only, got {model.dtype}")
    if mask is None:
        mask = build_freeze_mask(model, "full")

    named = model.named_parameters()
    tensors = []
    offset = 0
    for name, t in named:
        nbytes = t.size * 4
        origin = ORIGINAL
        if name.startswith("blocks."):
            origin = model.block_origin[int(name.split(".")[1])]
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "frozen": not mask.flags[name], "origin": origin})
        offset += nbytes

    ad = model.adapter_spec
    ex = model.expansion_spec
    manifest = {
        "config": {k: getattr(model.config, k) for k in
                   ("image_size", "patch_size", "dim", "depth", "heads",
                    "num_classes", "channels", "mlp_ratio", "eps")},
        "block_origin": list(model.block_origin),
        "strategy": mask.tag,
        "mask": _mask_meta(mask),
        "adapter_spec": None if ad is None else {"r": ad.r, "alpha": ad.alpha, "init_std": ad.init_std},
        "expansion_spec": None if ex is None else {"p": ex.p},
        "tensors": tensors,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for _, t in named:
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str):
    """Read a checkpoint back into (model, mask)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: shorter than a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version} not supported (expected {VERSION})")
    if len(raw) < _HEADER.size + mlen:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as bad:
        raise FormatError(f"{path}: manifest is not valid JSON: {bad}") from None

    config = ViTConfig(**manifest["config"])
    ad = manifest.get("adapter_spec")
    adapter_spec = None if ad is None else AdapterSpec(ad["r"], ad["alpha"], ad["init_std"])
    ex = manifest.get("expansion_spec")
    expansion_spec = None if ex is None else ExpansionSpec(ex["p"])
    block_origin = manifest.get("block_origin") or [ORIGINAL] * config.depth
    if len(block_origin) != config.depth:
        raise FormatError(f"{path}: {len(block_origin)} origin tags for depth {config.depth}")

    expected = parameter_shapes(config, lora_rank=None if adapter_spec is None else adapter_spec.r)
    table = manifest["tensors"]
    if [e["name"] for e in table] != [n for n, _ in expected]:
        raise FormatError(f"{path}: tensor table does not match the declared layout")

    payload = raw[_HEADER.size + mlen:]
    total = sum(int(np.prod(e["shape"])) * 4 for e in table)
    if len(payload) != total:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, layout needs {total}")

    tensors = {}
    offset = 0
    for entry, (name, shape) in zip(table, expected):
        if tuple(entry["shape"]) != tuple(shape):
            raise FormatError(f"{path}: tensor {name} has shape {entry['shape']}, expected {list(shape)}")
        if entry["offset"] != offset:
            raise FormatError(f"{path}: tensor {name} at offset {entry['offset']}, expected {offset}")
        nbytes = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        tensors[name] = Tensor(arr.reshape(shape).astype(np.float32, copy=True), requires_grad=True)
        offset += nbytes

    scale = None if adapter_spec is None else adapter_spec.scale
    blocks = []
    for i in range(config.depth):
        p = f"blocks.{i}."
        adapters = None
        if adapter_spec is not None:
            adapters = BlockAdapters(
                q=LoraPair(tensors[p + "attn.lora_q.a"], tensors[p + "attn.lora_q.b"]),
                v=LoraPair(tensors[p + "attn.lora_v.a"], tensors[p + "attn.lora_v.b"]),
                scale=scale)
        blocks.append(TransformerBlock(
            ln1_gamma=tensors[p + "ln1.gamma"], ln1_beta=tensors[p + "ln1.beta"],
            qkv_w=tensors[p + "attn.qkv.weight"], qkv_b=tensors[p + "attn.qkv.bias"],
            out_w=tensors[p + "attn.out.weight"], out_b=tensors[p + "attn.out.bias"],
            ln2_gamma=tensors[p + "ln2.gamma"], ln2_beta=tensors[p + "ln2.beta"],
            up_w=tensors[p + "mlp.up.weight"], up_b=tensors[p + "mlp.up.bias"],
            down_w=tensors[p + "mlp.down.weight"], down_b=tensors[p + "mlp.down.bias"],
            adapters=adapters))
    model = ViTModel(config=config,
                     patch_w=tensors["patch_embed.weight"], patch_b=tensors["patch_embed.bias"],
                     cls_token=tensors["cls_token"], pos_embed=tensors["pos_embed"],
                     blocks=blocks, block_origin=list(block_origin),
                     final_gamma=tensors["final_norm.gamma"], final_beta=tensors["final_norm.beta"],
                     head_w=tensors["head.weight"], head_b=tensors["head.bias"],
                     adapter_spec=adapter_spec, expansion_spec=expansion_spec)

    meta = manifest.get("mask")
    flags = {e["name"]: not e["frozen"] for e in table}
    if meta is None:
        mask = FreezeMask(kind="full", flags=flags)
    else:
        mask = FreezeMask(kind=meta["kind"], flags=flags, k=meta.get("k"))
    return model, mask
