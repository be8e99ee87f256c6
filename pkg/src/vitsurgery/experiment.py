"""Two-domain forgetting experiment and learning-rate sweep.

The protocol: pretrain a backbone on the source domain, freeze a K-NN
feature index built from it, then for each tuning strategy clone the
backbone, perform any surgery, swap in a fresh transfer head, fine-tune
on the transfer domain, and measure (a) best transfer accuracy and
(b) source K-NN accuracy of the tuned backbone against the frozen index.
The gap to the untouched backbone's accuracy is the forgetting drop.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, replace

from . import rng
from .data import Dataset, gen_domain
from .errors import InputError, UsageError, VitSurgeryError
from .knn import (DEFAULT_K, ForgettingRecord, build_index, forgetting_report,
                  knn_predict, top1_accuracy)
from .model import (ViTConfig, ViTModel, block_param_count, build_vit, extract_features,
                    head_param_count, param_count, replace_head)
from .peft import (AdapterSpec, ExpansionSpec, attach_lora, build_freeze_mask,
                   expand_blocks, verify_identity)
from .training import TrainConfig, evaluate, restore_params, train

DEFAULT_LRS = (0.05, 0.01, 0.005)

# the fixed desk-scale reference setup; every acceptance-style run keys off this
REFERENCE = {
    "seed": 7,
    "model": {"image_size": 32, "patch_size": 8, "dim": 64, "depth": 4, "heads": 4,
              "num_classes": 8, "channels": 3, "mlp_ratio": 4, "eps": 1e-6},
    "source": {"name": "source", "num_classes": 8, "n": 4000, "image_size": 32},
    "transfer": {"name": "transfer", "num_classes": 4, "n": 2000, "image_size": 32},
    "pretrain": {"lr": 0.01, "steps": 2000, "eval_every": 100, "batch_size": 32, "momentum": 0.9},
    "train": {"lr": 0.02, "steps": 2000, "eval_every": 100, "batch_size": 32, "momentum": 0.9},
    "strategies": ["full", "linear", "top_k k=2", "lora r=8", "blockexp p=1"],
    "k": DEFAULT_K,
    "lrs": list(DEFAULT_LRS),
    "p_values": [1, 2],
}


# ---------------------------------------------------------------------------
# strategies


@dataclass(frozen=True)
class Strategy:
    kind: str                  # full | linear | top_k | lora | blockexp
    k: int | None = None
    r: int | None = None
    alpha: float | None = None
    p: int | None = None

    @property
    def tag(self) -> str:
        if self.kind == "top_k":
            return f"top_k k={self.k}"
        if self.kind == "lora":
            tag = f"lora r={self.r}"
            if self.alpha is not None and self.alpha != self.r:
                tag += f" alpha={self.alpha:g}"
            return tag
        if self.kind == "blockexp":
            return f"blockexp p={self.p}"
        return self.kind


_PRIMARY_PARAM = {"top_k": "k", "lora": "r", "blockexp": "p"}


def parse_strategy(text) -> Strategy:
    """Accepts 'full', 'linear', 'top_k k=2', 'lora:8', 'blockexp(p=3)', etc."""
    if isinstance(text, Strategy):
        return text
    s = str(text).strip().lower()
    m = re.match(r"^([a-z_]+)\s*[:(]?\s*(.*?)\)?\s*$", s)
    if not m:
        raise UsageError(f"cannot parse strategy {text!r}")
    kind, rest = m.group(1), m.group(2)
    if kind == "topk":
        kind = "top_k"
    if kind in ("full", "linear"):
        if rest:
            raise UsageError(f"strategy {kind!r} takes no parameters, got {rest!r}")
        return Strategy(kind)
    if kind not in _PRIMARY_PARAM:
        raise UsageError(f"unknown strategy {kind!r}")
    params = {}
    for part in re.split(r"[,\s]+", rest):
        if not part:
            continue
        if "=" in part:
            key, val = part.split("=", 1)
            params[key] = val
        else:
            params[_PRIMARY_PARAM[kind]] = part
    try:
        if kind == "top_k":
            return Strategy("top_k", k=int(params.pop("k")))
        if kind == "lora":
            r = int(params.pop("r"))
            alpha = float(params.pop("alpha")) if "alpha" in params else None
            if params:
                raise UsageError(f"unknown lora parameters {sorted(params)}")
            return Strategy("lora", r=r, alpha=alpha)
        return Strategy("blockexp", p=int(params.pop("p")))
    except KeyError as missing:
        raise UsageError(f"strategy {kind!r} is missing its {missing} parameter") from None
    except ValueError as bad:
        raise UsageError(f"bad strategy parameter in {text!r}: {bad}") from None


def strategy_param_counts(config: ViTConfig, strategy) -> dict:
    """Total and trainable scalar counts for a strategy, without allocating.

    Mirrors exactly what build + surgery + build_freeze_mask would produce,
    so large layouts can be audited in microseconds.
    """
    st = parse_strategy(strategy)
    block = block_param_count(config)
    head = head_param_count(config)
    base_total = (config.patch_dim * config.dim + config.dim        # patch embed
                  + config.dim                                      # cls token
                  + (1 + config.num_patches) * config.dim           # pos embed
                  + config.depth * block
                  + 2 * config.dim                                  # final norm
                  + head)
    if st.kind == "full":
        return {"total": base_total, "trainable": base_total}
    if st.kind == "linear":
        return {"total": base_total, "trainable": head}
    if st.kind == "top_k":
        if st.k < 1 or st.k > config.depth:
            raise UsageError(f"top_k k={st.k} out of range for depth {config.depth}")
        return {"total": base_total, "trainable": st.k * block + head}
    if st.kind == "lora":
        AdapterSpec(st.r, st.alpha)  # validate
        adapters = config.depth * 4 * config.dim * st.r
        return {"total": base_total + adapters, "trainable": adapters + head}
    ExpansionSpec(st.p).validate(config.depth)
    return {"total": base_total + st.p * block, "trainable": st.p * block + head}


def _apply_surgery(base: ViTModel, st: Strategy, seed: int):
    """Returns (model, mask kind, mask k); identity-preserving by contract."""
    if st.kind in ("full", "linear", "top_k"):
        return base.clone(), st.kind, st.k
    if st.kind == "lora":
        return attach_lora(base, AdapterSpec(st.r, st.alpha), seed=seed), "lora_only", None
    if st.kind == "blockexp":
        return expand_blocks(base, ExpansionSpec(st.p)), "expanded_only", None
    raise UsageError(f"unknown strategy kind {st.kind!r}")


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ReportRow:
    strategy: str
    trainable_params: int
    transfer_acc: float   # percent
    source_acc: float     # percent, after tuning
    mean: float           # percent
    drop: float           # percentage points


@dataclass
class ExperimentReport:
    rows: list
    baseline: float       # percent source K-NN accuracy of the untouched backbone
    config: dict


def _source_probe(base: ViTModel, source: Dataset, k: int):
    """Frozen feature index from the base backbone plus its own baseline."""
    src_train, src_val = source.train_split(), source.val_split()
    index = build_index(extract_features(base, src_train.images), src_train.labels)
    base_preds = knn_predict(index, extract_features(base, src_val.images), k)
    baseline = top1_accuracy(base_preds, src_val.labels)
    return index, src_val, baseline


def _tuned_strategy_run(base, st, transfer, config, seed):
    """Surgery, fresh head, masked fine-tune; model restored to best checkpoint."""
    model, mask_kind, mask_k = _apply_surgery(base, st, seed)
    model = replace_head(model, transfer.num_classes, seed)
    mask = build_freeze_mask(model, mask_kind, k=mask_k)
    hist = train(model, mask, transfer, replace(config, seed=seed))
    restore_params(model, hist.best_snapshot)
    transfer_acc = hist.best_acc if hist.eval_points else evaluate(model, transfer.val_split())
    return model, mask, transfer_acc


def run_forgetting_experiment(base: ViTModel, source: Dataset, transfer: Dataset,
                              strategies, config: TrainConfig, k: int = DEFAULT_K) -> ExperimentReport:
    strategies = [parse_strategy(s) for s in strategies]
    if not strategies:
        raise InputError("no strategies requested")
    tags = [st.tag for st in strategies]
    if len(set(tags)) != len(tags):
        raise UsageError(f"duplicate strategy tags in {tags}")
    if base.config.num_classes != source.num_classes:
        raise UsageError("base model's head does not match the source domain")

    index, src_val, baseline = _source_probe(base, source, k)
    probes = src_val.images[:16]

    rows, identity_diffs, rapid = [], {}, None
    for st in strategies:
        seed_s = rng.derive_seed(config.seed, "strategy", st.tag)
        surgical, _, _ = _apply_surgery(base, st, seed_s)
        diff = verify_identity(base, surgical, probes)
        identity_diffs[st.tag] = diff
        if diff != 0.0:
            raise VitSurgeryError(f"surgery for {st.tag!r} changed the function: max|diff|={diff}")
        del surgical

        model, mask, transfer_acc = _tuned_strategy_run(base, st, transfer, config, seed_s)
        after = top1_accuracy(
            knn_predict(index, extract_features(model, src_val.images), k), src_val.labels)
        rec = forgetting_report(baseline * 100, after * 100, transfer_acc * 100)
        trainable = param_count(model, mask)["trainable"]
        rows.append(ReportRow(st.tag, trainable, rec.transfer_acc, rec.source_acc_after,
                              rec.mean, rec.drop))

        if st.kind == "full" and rapid is None and config.steps >= config.eval_every:
            # run just the first eval window at the hottest sweep lr to see
            # how fast the source domain decays under unconstrained tuning
            probe_cfg = replace(config, steps=config.eval_every, lr=max(DEFAULT_LRS))
            window_model, _, _ = _tuned_strategy_run(base, st, transfer, probe_cfg, seed_s)
            w_after = top1_accuracy(
                knn_predict(index, extract_features(window_model, src_val.images), k),
                src_val.labels)
            rapid = {"strategy": st.tag, "step": config.eval_every, "lr": probe_cfg.lr,
                     "source_acc": w_after * 100, "drop": (baseline - w_after) * 100}

    echo = {
        "seed": config.seed, "k": k,
        "lr": config.lr, "steps": config.steps, "eval_every": config.eval_every,
        "batch_size": config.batch_size, "momentum": config.momentum,
        "model": asdict(base.config),
        "source": _dataset_echo(source),
        "transfer": _dataset_echo(transfer),
        "strategies": tags,
        "identity_max_abs_diff": identity_diffs,
        "rapid_forgetting": rapid,
    }
    return ExperimentReport(rows=rows, baseline=baseline * 100, config=echo)


def _dataset_echo(d: Dataset) -> dict:
    return {"name": d.name, "seed": d.seed, "num_classes": d.num_classes,
            "n": len(d), "image_size": int(d.images.shape[-1])}


# ---------------------------------------------------------------------------
# learning-rate sweep


@dataclass
class SweepCell:
    p: int
    lr: float
    trainable_params: int
    record: ForgettingRecord


@dataclass
class SweepGrid:
    cells: list
    baseline: float  # percent
    config: dict


def lr_sweep(base: ViTModel, source: Dataset, transfer: Dataset, lrs, p_values,
             config: TrainConfig, k: int = DEFAULT_K) -> SweepGrid:
    """Cross product of expansion size and learning rate, one cell each."""
    lrs = list(lrs)
    p_values = list(p_values)
    if not lrs or not p_values:
        raise InputError("lr_sweep needs nonempty lrs and p_values")
    index, src_val, baseline = _source_probe(base, source, k)

    cells = []
    for p in p_values:
        for lr in lrs:
            st = Strategy("blockexp", p=p)
            seed_c = rng.derive_seed(config.seed, "sweep", f"p={p}", f"lr={lr:g}")
            cell_cfg = replace(config, lr=lr)
            model, mask, transfer_acc = _tuned_strategy_run(base, st, transfer, cell_cfg, seed_c)
            after = top1_accuracy(
                knn_predict(index, extract_features(model, src_val.images), k), src_val.labels)
            rec = forgetting_report(baseline * 100, after * 100, transfer_acc * 100)
            cells.append(SweepCell(p=p, lr=lr, trainable_params=param_count(model, mask)["trainable"],
                                   record=rec))

    echo = {
        "seed": config.seed, "k": k,
        "lrs": lrs, "p_values": p_values,
        "steps": config.steps, "eval_every": config.eval_every,
        "batch_size": config.batch_size, "momentum": config.momentum,
        "model": asdict(base.config),
        "source": _dataset_echo(source),
        "transfer": _dataset_echo(transfer),
    }
    return SweepGrid(cells=cells, baseline=baseline * 100, config=echo)


# ---------------------------------------------------------------------------
# reference setup


def reference_datasets(cfg: dict | None = None):
    cfg = cfg or REFERENCE
    seed = cfg["seed"]
    s, t = cfg["source"], cfg["transfer"]
    source = gen_domain(s["name"], seed, s["num_classes"], s["n"], s["image_size"])
    transfer = gen_domain(t["name"], seed, t["num_classes"], t["n"], t["image_size"])
    return source, transfer


def prepare_base(model_cfg: ViTConfig, source: Dataset, cfg: TrainConfig) -> ViTModel:
    """Supervised pretraining on the source domain; best checkpoint kept."""
    model = build_vit(model_cfg, seed=rng.derive_seed(cfg.seed, "base-init"))
    mask = build_freeze_mask(model, "full")
    hist = train(model, mask, source, cfg)
    if hist.eval_points:
        restore_params(model, hist.best_snapshot)
    return model


def reference_base(cfg: dict | None = None):
    """Pretrained reference backbone plus its two domains."""
    cfg = cfg or REFERENCE
    source, transfer = reference_datasets(cfg)
    model_cfg = ViTConfig(**cfg["model"])
    pre = TrainConfig(seed=rng.derive_seed(cfg["seed"], "pretrain"), **cfg["pretrain"])
    base = prepare_base(model_cfg, source, pre)
    return base, source, transfer


def reference_experiment(cfg: dict | None = None, base=None, source=None, transfer=None):
    """The fixed desk-scale experiment; pass a prepared base to skip pretraining."""
    cfg = cfg or REFERENCE
    if base is None:
        base, source, transfer = reference_base(cfg)
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    return run_forgetting_experiment(base, source, transfer, cfg["strategies"], tcfg, k=cfg["k"])


def reference_sweep(cfg: dict | None = None, base=None, source=None, transfer=None):
    cfg = cfg or REFERENCE
    if base is None:
        base, source, transfer = reference_base(cfg)
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    return lr_sweep(base, source, transfer, cfg["lrs"], cfg["p_values"], tcfg, k=cfg["k"])
