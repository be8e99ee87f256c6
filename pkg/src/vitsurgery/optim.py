"""Masked momentum SGD and a finite-difference gradient checker."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InputError, UsageError
from .tensor import Tensor, backward, no_grad


class SGD:
    """Minibatch SGD with classical momentum and per-parameter freezing.

    ``trainable`` is a flag per parameter (None trains everything).  Frozen
    parameters are never read or written, so they and their (non-existent)
    momentum buffers stay bit-identical for the whole run.
    """

    def __init__(self, params, trainable=None, lr: float = 0.01, momentum: float = 0.9):
        if lr < 0:
            raise InputError(f"learning rate must be >= 0, got {lr}")
        if not 0 <= momentum < 1:
            raise InputError(f"momentum must lie in [0, 1), got {momentum}")
        params = list(params)
        if trainable is None:
            trainable = [True] * len(params)
        trainable = [bool(t) for t in trainable]
        if len(trainable) != len(params):
            raise UsageError(f"{len(params)} params but {len(trainable)} trainable flags")
        self.params = params
        self.trainable = trainable
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {
            i: np.zeros(p.data.size, dtype=p.dtype)
            for i, (p, t) in enumerate(zip(params, trainable)) if t
        }

    def step(self) -> None:
        for i, (p, t) in enumerate(zip(self.params, self.trainable)):
            if not t:
                continue
            if p.grad is None:
                raise UsageError("trainable parameter has no gradient; run backward() first")
            kernels.sgd_update(p.data.reshape(-1), p.grad.reshape(-1),
                               self._velocity[i], self.lr, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params, trainable, lr: float, momentum: float = 0.0, state: SGD | None = None) -> SGD:
    """One masked SGD step; returns the optimizer holding the momentum state.

    Pass the returned object back in to carry momentum across steps.
    """
    if state is None:
        state = SGD(params, trainable, lr=lr, momentum=momentum)
    state.step()
    return state


def grad_check(f, params, epsilon: float = 1e-5):
    """Worst relative error of backward() against central differences.

    ``f`` is a zero-argument graph builder evaluating the current parameter
    values to a scalar loss tensor.  Every coordinate of every parameter is
    perturbed by +/- epsilon; the relative error denominator is
    max(|analytic|, |numeric|, 1e-12).  float64 parameters only.
    """
    if epsilon <= 0:
        raise InputError(f"epsilon must be > 0, got {epsilon}")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise UsageError("grad_check requires float64 parameters")
        if not p.requires_grad:
            raise UsageError("grad_check parameters must require grad")
        p.grad = None

    loss = f()
    backward(loss)
    analytic = [np.zeros(p.data.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + epsilon
                plus = float(f().data)
                flat[i] = original - epsilon
                minus = float(f().data)
                flat[i] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-12)
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
