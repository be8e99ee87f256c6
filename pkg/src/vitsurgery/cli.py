"""Command-line surface.

Exit codes: 0 success, 1 usage or domain error (bad flags, bad specs,
violated preconditions), 2 I/O or unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, dataset_from_idx, gen_domain
from .errors import UsageError, VitSurgeryError
from .experiment import (REFERENCE, parse_strategy, reference_experiment, reference_sweep,
                         strategy_param_counts)
from .knn import DEFAULT_K, build_index, knn_predict, top1_accuracy
from .model import VIT_B16, ViTConfig, extract_features, format_count, replace_head
from .peft import (AdapterSpec, ExpansionSpec, attach_lora, build_freeze_mask,
                   expand_blocks, merge_lora, random_probes, verify_identity)
from .report import emit_report, emit_sweep, format_pct
from .training import TrainConfig, restore_params, train

_PRESETS = {
    "vit-b16": VIT_B16,
    "vit-b/16": VIT_B16,
    "reference": REFERENCE["model"],
    "tiny": REFERENCE["model"],
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports problems through the package's own error type."""

    def error(self, message):
        raise UsageError(message)


def _load_model_config(spec: str) -> ViTConfig:
    preset = _PRESETS.get(spec.lower())
    if preset is not None:
        return ViTConfig(**preset)
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"--config {spec!r} is neither a preset "
                         f"({', '.join(sorted(set(_PRESETS)))}) nor a file")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as bad:
        raise UsageError(f"{spec}: not valid JSON: {bad}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{spec}: expected a JSON object of model fields")
    try:
        return ViTConfig(**raw)
    except TypeError as bad:
        raise UsageError(f"{spec}: {bad}") from None


def parse_dataset_spec(spec: str, model_cfg: ViTConfig | None = None) -> Dataset:
    """Build a dataset from a compact spec string.

    Synthetic: ``name[:key=val,...]`` with keys seed, classes, n, size,
    channels (size/channels default to the model's expectations).
    IDX files: ``idx:<images-path>,<labels-path>[,name=...][,seed=...]``.
    """
    head, _, rest = spec.partition(":")
    head = head.strip()
    if not head:
        raise UsageError(f"empty dataset name in {spec!r}")
    parts = [p for p in rest.split(",") if p] if rest else []

    if head == "idx":
        paths = [p for p in parts if "=" not in p]
        opts = dict(p.split("=", 1) for p in parts if "=" in p)
        if len(paths) != 2:
            raise UsageError(f"idx spec needs images and labels paths, got {spec!r}")
        return dataset_from_idx(paths[0], paths[1], name=opts.get("name", "idx"),
                                seed=int(opts.get("seed", 0)))

    opts = {}
    for part in parts:
        if "=" not in part:
            raise UsageError(f"expected key=value in dataset spec, got {part!r}")
        key, val = part.split("=", 1)
        opts[key.strip()] = val.strip()
    known = {"seed", "classes", "n", "size", "channels"}
    unknown = set(opts) - known
    if unknown:
        raise UsageError(f"unknown dataset keys {sorted(unknown)}; valid: {sorted(known)}")
    try:
        seed = int(opts.get("seed", REFERENCE["seed"]))
        classes = int(opts.get("classes", model_cfg.num_classes if model_cfg else 8))
        n = int(opts.get("n", 2000))
        size = int(opts.get("size", model_cfg.image_size if model_cfg else 32))
        channels = int(opts.get("channels", model_cfg.channels if model_cfg else 3))
    except ValueError as bad:
        raise UsageError(f"bad dataset spec {spec!r}: {bad}") from None
    return gen_domain(head, seed=seed, num_classes=classes, n=n,
                      image_size=size, channels=channels)


def _merged_reference(path: str | None) -> dict:
    if path is None:
        return dict(REFERENCE)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as bad:
        raise UsageError(f"{path}: not valid JSON: {bad}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected a JSON object")
    unknown = set(raw) - set(REFERENCE)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}; "
                         f"valid: {sorted(REFERENCE)}")
    merged = {}
    for key, val in REFERENCE.items():
        if isinstance(val, dict):
            override = raw.get(key, {})
            if not isinstance(override, dict):
                raise UsageError(f"{path}: {key!r} must be an object")
            merged[key] = {**val, **override}
        else:
            merged[key] = raw.get(key, val)
    return merged


# ---------------------------------------------------------------------------
# subcommands


def _cmd_count_params(args) -> int:
    cfg = _load_model_config(args.config)
    counts = strategy_param_counts(cfg, args.strategy)
    print(f"strategy {parse_strategy(args.strategy).tag}")
    print(f"total {counts['total']:,} ({format_count(counts['total'])})")
    print(f"trainable {counts['trainable']:,} ({format_count(counts['trainable'])})")
    return 0


def _cmd_init(args) -> int:
    from .model import build_vit

    cfg = _load_model_config(args.config)
    model = build_vit(cfg, seed=args.seed)
    save_checkpoint(model, build_freeze_mask(model, "full"), args.out)
    print(f"saved {args.out}")
    return 0


def _cmd_expand(args) -> int:
    model, _ = load_checkpoint(args.inp)
    out = expand_blocks(model, ExpansionSpec(args.p))
    save_checkpoint(out, build_freeze_mask(out, "expanded_only"), args.out)
    print(f"expanded depth {model.config.depth} -> {out.config.depth}; saved {args.out}")
    return 0


def _cmd_lora_attach(args) -> int:
    model, _ = load_checkpoint(args.inp)
    spec = AdapterSpec(args.r, args.alpha)
    out = attach_lora(model, spec, seed=args.seed)
    save_checkpoint(out, build_freeze_mask(out, "lora_only"), args.out)
    print(f"attached rank-{spec.r} adapters (alpha={spec.alpha:g}); saved {args.out}")
    return 0


def _cmd_lora_merge(args) -> int:
    model, _ = load_checkpoint(args.inp)
    out = merge_lora(model)
    save_checkpoint(out, build_freeze_mask(out, "full"), args.out)
    print(f"merged adapters into base weights; saved {args.out}")
    return 0


def _cmd_verify_identity(args) -> int:
    a, _ = load_checkpoint(args.a)
    b, _ = load_checkpoint(args.b)
    probes = random_probes(a.config, args.probes, seed=args.seed)
    diff = verify_identity(a, b, probes)
    print(f"{diff:g}")
    return 0


def _cmd_train(args) -> int:
    model, mask = load_checkpoint(args.ckpt)
    data = parse_dataset_spec(args.data, model.config)
    if data.num_classes != model.config.num_classes:
        model = replace_head(model, data.num_classes, seed=args.seed)
        mask = build_freeze_mask(model, mask.kind, k=mask.k)
        print(f"replaced head for {data.num_classes} classes")
    config = TrainConfig(lr=args.lr, steps=args.steps, eval_every=args.eval_every,
                         batch_size=args.batch_size, momentum=args.momentum, seed=args.seed)
    hist = train(model, mask, data, config)
    for pt in hist.eval_points:
        print(f"step {pt.step} val_acc {format_pct(pt.val_acc * 100)} loss {pt.loss:.4f}")
    if hist.eval_points:
        restore_params(model, hist.best_snapshot)
        print(f"best step {hist.best_step} val_acc {format_pct(hist.best_acc * 100)}")
    save_checkpoint(model, mask, args.out)
    print(f"saved {args.out}")
    return 0


def _cmd_eval_knn(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    data = parse_dataset_spec(args.source, model.config)
    train_split, val_split = data.train_split(), data.val_split()
    index = build_index(extract_features(model, train_split.images), train_split.labels)
    preds = knn_predict(index, extract_features(model, val_split.images), args.k)
    acc = top1_accuracy(preds, val_split.labels)
    print(f"knn_acc {format_pct(acc * 100)}")
    return 0


def _print_report(report) -> None:
    print(f"baseline source knn_acc {format_pct(report.baseline)}")
    for row in report.rows:
        print(f"{row.strategy}: trainable {row.trainable_params:,} "
              f"transfer {format_pct(row.transfer_acc)} source {format_pct(row.source_acc)} "
              f"mean {format_pct(row.mean)} drop {format_pct(row.drop)}")
    rapid = report.config.get("rapid_forgetting")
    if rapid:
        print(f"rapid forgetting: {format_pct(rapid['drop'])} points "
              f"by step {rapid['step']} at lr {rapid['lr']:g}")


def _cmd_experiment(args) -> int:
    cfg = _merged_reference(args.config)
    report = reference_experiment(cfg)
    emit_report(report, args.out)
    _print_report(report)
    print(f"saved {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _merged_reference(args.config)
    grid = reference_sweep(cfg)
    emit_sweep(grid, args.out)
    print(f"baseline source knn_acc {format_pct(grid.baseline)}")
    for cell in grid.cells:
        print(f"p={cell.p} lr={cell.lr:g}: trainable {cell.trainable_params:,} "
              f"transfer {format_pct(cell.record.transfer_acc)} "
              f"source {format_pct(cell.record.source_acc_after)} "
              f"drop {format_pct(cell.record.drop)}")
    print(f"saved {args.out}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="vitsurgery",
                     description="Fine-tuning surgery and forgetting evaluation for ViTs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("count-params", help="exact parameter accounting for a strategy")
    p.add_argument("--config", default="vit-b16",
                   help="preset name (vit-b16, tiny) or JSON file of model fields")
    p.add_argument("--strategy", default="full",
                   help="full | linear | top_k k=N | lora r=N [alpha=X] | blockexp p=N")
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("init", help="create a freshly initialized checkpoint")
    p.add_argument("--config", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("expand", help="insert zero-initialized copies of existing blocks")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--p", type=int, required=True, help="number of blocks to add")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_expand)

    p = sub.add_parser("lora-attach", help="attach low-rank adapters to q and v projections")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--r", type=int, required=True, help="adapter rank")
    p.add_argument("--alpha", type=float, default=None, help="scaling numerator (default: r)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_lora_attach)

    p = sub.add_parser("lora-merge", help="fold adapters into the base weights")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_lora_merge)

    p = sub.add_parser("verify-identity", help="max |logit difference| on random probes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify_identity)

    p = sub.add_parser("train", help="fine-tune a checkpoint under its stored mask")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset spec, e.g. transfer:classes=4,n=2000")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-knn", help="K-NN accuracy of a checkpoint's features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True, help="dataset spec; index from train split, queries from val")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.set_defaults(func=_cmd_eval_knn)

    p = sub.add_parser("experiment", help="two-domain forgetting experiment (CSV + JSON report)")
    p.add_argument("--config", default=None, help="JSON overrides for the reference setup")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("sweep", help="expansion-size x learning-rate forgetting grid")
    p.add_argument("--config", default=None, help="JSON overrides for the reference setup")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except VitSurgeryError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
