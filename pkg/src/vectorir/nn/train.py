"""Loss, ADAM and the training loop (including leave-one-design-out)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .model import ModelConfig, backward, init_params, predict_normalized

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


def regularized(name: str) -> bool:
    return name.endswith(".w")


def l2_norm_sq(params) -> float:
    return float(sum(np.sum(p * p) for k, p in params.items() if regularized(k)))


def loss_and_grad(cfg: ModelConfig, params, batch, lam: float = 1e-4):
    """Mean squared error over every instance in ``batch`` plus ``lam * ||w||^2``.

    ``batch`` is a sequence of ``(sample, target)`` with targets in normalized
    IR units. Only convolution kernels are regularized.
    Returns ``(loss, grads, sse, count)``.
    """
    if not batch:
        raise ValueError("empty batch")
    total = sum(len(t) for _, t in batch)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    sse = 0.0
    for sample, target in batch:
        pred, (fcache, rcache) = predict_normalized(cfg, params, sample, keep=True)
        err = pred - target
        if not np.all(np.isfinite(err)):
            raise FloatingPointError("NaN in forward pass")
        sse += float(err @ err)
        dbeta = L.regression_backward(2.0 * err / total, rcache)
        for k, g in backward(cfg, fcache, dbeta).items():
            grads[k] += g
    for k, p in params.items():
        if regularized(k):
            grads[k] += 2.0 * lam * p
    loss = sse / total + lam * l2_norm_sq(params)
    return loss, grads, sse, total


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update, in place on ``params``; returns ``params``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 200
    lr: float = 1e-3
    lam: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    patience: int = 20
    min_delta: float = 0.0
    seed: int = 0
    warm_start: bool = True


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)  # dicts: epoch, train_rmse, val_rmse, loss
    best_epoch: int = 0
    stopped_early: bool = False

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_rmse", "val_rmse", "loss"])
            for row in self.log:
                w.writerow([row["epoch"], repr(row["train_rmse"]), repr(row["val_rmse"]), repr(row["loss"])])


def rmse_volts(cfg, params, data, ir_scale: float) -> float:
    sse, n = 0.0, 0
    for sample, target in data:
        err = predict_normalized(cfg, params, sample) - target
        sse += float(err @ err)
        n += len(err)
    return math.sqrt(sse / n) * ir_scale if n else float("nan")


def linear_warm_start(cfg: ModelConfig, params, train_set, ridge: float = 1e-6):
    """Start from the best tile-independent linear model.

    The head kernel is zeroed, so the coefficient map is the head bias
    everywhere, and the bias is set to the ridge least-squares fit of the
    targets on the instance features. Gradients still reach the head kernel
    through the (nonzero) decoder activations.
    """
    rows = [s.fvec if not cfg.bias else np.c_[s.fvec, np.ones(len(s.fvec))] for s, _ in train_set]
    A = np.vstack(rows)
    y = np.concatenate([t for _, t in train_set])
    if not len(y):
        return params
    gram = A.T @ A + ridge * len(y) * np.eye(A.shape[1])
    params["head.w"] = np.zeros_like(params["head.w"])
    params["head.b"] = np.linalg.solve(gram, A.T @ y)
    return params


def train(cfg: ModelConfig, train_set, hyper: TrainParams | None = None, val_set=None,
          ir_scale: float = 1.0, params=None) -> TrainResult:
    """Train on ``(sample, target)`` pairs with per-epoch seeded shuffling.

    Stops early once validation RMSE has not improved for ``patience`` epochs
    and restores the best parameters. Without a validation set training RMSE
    is monitored instead.
    """
    hyper = hyper or TrainParams()
    if not train_set:
        raise ValueError("empty training set")
    fresh = params is None
    params = {k: v.copy() for k, v in (params or init_params(cfg, hyper.seed)).items()}
    if fresh and hyper.warm_start:
        linear_warm_start(cfg, params, train_set)
    state = AdamState()
    rng = np.random.default_rng(hyper.seed + 1)
    result = TrainResult(params=params)
    best, best_params, stale = math.inf, {k: v.copy() for k, v in params.items()}, 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train_set))
        sse = n = 0
        loss_sum = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = [train_set[i] for i in order[start:start + hyper.batch_size]]
            loss, grads, b_sse, b_n = loss_and_grad(cfg, params, batch, hyper.lam)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}")
            loss_sum += loss * b_n
            sse += b_sse
            n += b_n
            adam_step(params, grads, state, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
        train_rmse = math.sqrt(sse / n) * ir_scale
        val_rmse = rmse_volts(cfg, params, val_set, ir_scale) if val_set else float("nan")
        result.log.append({"epoch": epoch, "train_rmse": train_rmse, "val_rmse": val_rmse,
                           "loss": loss_sum / n})
        log.debug("epoch %d train %.4g val %.4g", epoch, train_rmse, val_rmse)
        monitor = val_rmse if val_set else train_rmse
        if monitor < best - hyper.min_delta:
            best, stale, result.best_epoch = monitor, 0, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= hyper.patience:
                result.stopped_early = True
                break
    if val_set:
        params.update(best_params)
    return result
