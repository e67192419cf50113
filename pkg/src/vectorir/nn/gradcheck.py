"""Central finite-difference checks for the model and its layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import activation_pattern, predict_normalized
from .train import l2_norm_sq, loss_and_grad


def rel_error(analytic, numeric, floor: float = 1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


@dataclass
class CheckReport:
    max_rel_error: float
    checked: int
    at_kink: int
    worst: tuple | None = None


def _loss_and_pattern(cfg, params, batch, lam):
    total = sum(len(t) for _, t in batch)
    sse = 0.0
    pats = []
    for sample, target in batch:
        pred, (fcache, _) = predict_normalized(cfg, params, sample, keep=True)
        err = pred - target
        sse += float(err @ err)
        pats.append(activation_pattern(fcache))
    return sse / total + lam * l2_norm_sq(params), tuple(pats)


def check_model(cfg, params, batch, lam: float = 1e-4, h: float = 1e-3, names=None) -> CheckReport:
    """Compare analytic gradients with central differences for every parameter entry.

    Entries whose +h / -h perturbation flips any ReLU or max-pool choice sit on
    a kink of the piecewise-polynomial loss; they are counted in ``at_kink``
    and left out of ``max_rel_error``.
    """
    _, grads, _, _ = loss_and_grad(cfg, params, batch, lam)
    _, base = _loss_and_pattern(cfg, params, batch, lam)
    worst, where, checked, kinks = 0.0, None, 0, 0
    for name in names or params:
        p = params[name]
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp, pat_p = _loss_and_pattern(cfg, params, batch, lam)
            p[idx] = old - h
            fm, pat_m = _loss_and_pattern(cfg, params, batch, lam)
            p[idx] = old
            if pat_p != base or pat_m != base:
                kinks += 1
                continue
            checked += 1
            e = float(rel_error(grads[name][idx], (fp - fm) / (2 * h)))
            if e > worst:
                worst, where = e, (name, idx, float(grads[name][idx]), (fp - fm) / (2 * h))
    return CheckReport(worst, checked, kinks, where)
