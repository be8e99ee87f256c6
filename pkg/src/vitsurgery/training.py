"""Minibatch SGD fine-tuning with best-checkpoint selection.

Shuffling is seeded per epoch and batches are taken sequentially from the
shuffled order, so a (model, mask, data, config) quadruple always reruns
to the same trajectory, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import InputError, UsageError
from .model import ViTModel, forward_logits
from .optim import SGD
from .peft import FreezeMask
from .tensor import backward, cross_entropy, no_grad


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    steps: int
    eval_every: int
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InputError(f"lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise InputError(f"steps must be >= 0, got {self.steps}")
        if self.eval_every < 1:
            raise InputError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.steps % self.eval_every != 0:
            raise InputError(f"eval_every {self.eval_every} must divide steps {self.steps}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class EvalPoint:
    step: int
    val_acc: float
    loss: float  # mean train loss over the window ending at this step


@dataclass
class TrainHistory:
    eval_points: list = field(default_factory=list)
    best_step: int = 0
    best_acc: float = float("-inf")
    best_snapshot: dict = field(default_factory=dict)

    def record(self, step: int, val_acc: float, loss: float, model: ViTModel):
        self.eval_points.append(EvalPoint(step, val_acc, loss))
        if val_acc > self.best_acc:  # strict: earliest step wins ties
            self.best_acc = val_acc
            self.best_step = step
            self.best_snapshot = snapshot_params(model)


def snapshot_params(model: ViTModel) -> dict:
    return {name: t.data.copy() for name, t in model.named_parameters()}


def restore_params(model: ViTModel, snap: dict):
    for name, t in model.named_parameters():
        t.data[...] = snap[name]


def evaluate(model: ViTModel, split, batch_size: int = 128) -> float:
    """Top-1 accuracy of argmax logits (ties resolve to the smaller class)."""
    if len(split) == 0:
        raise InputError("cannot evaluate an empty split")
    hits = 0
    with no_grad():
        for lo in range(0, len(split), batch_size):
            logits = forward_logits(model, split.images[lo:lo + batch_size]).data
            hits += int(np.sum(np.argmax(logits, axis=1) == split.labels[lo:lo + batch_size]))
    return hits / len(split)


def _batch_stream(n: int, batch_size: int, seed: int):
    """Seeded per-epoch shuffle, sequential (possibly ragged) minibatches."""
    epoch = 0
    while True:
        order = rng.generator(rng.derive_seed(seed, "epoch", str(epoch))).permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo:lo + batch_size]
        epoch += 1


def train(model: ViTModel, mask: FreezeMask, data, config: TrainConfig) -> TrainHistory:
    """SGD on the train split; evaluates the val split every eval_every steps.

    The model is left at its final state; the history carries a snapshot
    of the best-by-val-accuracy checkpoint for the caller to restore.
    """
    if model.config.num_classes != data.num_classes:
        raise UsageError(f"model has {model.config.num_classes} classes, dataset has {data.num_classes}")
    history = TrainHistory()
    if config.steps == 0:
        history.best_snapshot = snapshot_params(model)
        return history

    named = model.named_parameters()
    opt = SGD([t for _, t in named], [mask.flags[n] for n, _ in named],
              lr=config.lr, momentum=config.momentum)
    train_split = data.train_split()
    val_split = data.val_split()
    batches = _batch_stream(len(train_split), config.batch_size, config.seed)

    # align graph recording with the mask so frozen subgraphs cost nothing
    saved_rg = [(t, t.requires_grad) for _, t in named]
    for n, t in named:
        t.requires_grad = mask.flags[n]
    try:
        window_loss, window_n = 0.0, 0
        for step in range(1, config.steps + 1):
            idx = next(batches)
            logits = forward_logits(model, train_split.images[idx])
            loss = cross_entropy(logits, train_split.labels[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            window_loss += loss.item()
            window_n += 1
            if step % config.eval_every == 0:
                acc = evaluate(model, val_split)
                history.record(step, acc, window_loss / window_n, model)
                window_loss, window_n = 0.0, 0
    finally:
        for t, flag in saved_rg:
            t.requires_grad = flag
    return history
