"""Layer primitives with hand-written backward passes.

Arrays carry no batch axis: a 3D activation is ``(C, D, H, W)`` and a 2D one
``(C, H, W)``. Every ``*_forward`` returns ``(out, cache)`` and the matching
``*_backward`` takes ``(dout, cache)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp: np.ndarray, k: tuple[int, ...]) -> np.ndarray:
    nd = len(k)
    return sliding_window_view(xp, k, axis=tuple(range(1, nd + 1)))


def _im2col(x, k, pad):
    """``(Ci*prod(K), prod(S))`` patch matrix of a zero-padded input."""
    nd = len(k)
    win = _windows(np.pad(x, pad), k)  # (Ci, *S, *K)
    perm = [0] + list(range(1 + nd, 1 + 2 * nd)) + list(range(1, 1 + nd))
    return win.transpose(perm).reshape(x.shape[0] * int(np.prod(k)), -1)


def conv_forward(x, w, b):
    """Stride-1 'same' convolution (cross-correlation) in 2 or 3 dimensions.

    x: (Ci, *S), w: (Co, Ci, *K) with odd K, b: (Co,)
    """
    k = w.shape[2:]
    nd = len(k)
    if x.ndim != nd + 1 or x.shape[0] != w.shape[1]:
        raise ValueError(f"conv input {x.shape} does not match kernel {w.shape}")
    pad = [(0, 0)] + [(kk // 2, kk // 2) for kk in k]
    cols = _im2col(x, k, pad)
    y = (w.reshape(w.shape[0], -1) @ cols).reshape((w.shape[0],) + x.shape[1:])
    y += b.reshape((-1,) + (1,) * nd)
    return y, (cols, w, pad, x.shape)


def conv_backward(dy, cache, need_dx: bool = True):
    """Gradients ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is False."""
    cols, w, pad, xshape = cache
    k = w.shape[2:]
    nd = len(k)
    Co = w.shape[0]
    dy2 = dy.reshape(Co, -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    # full correlation of dy with the flipped kernel, channels swapped
    wf = w[(slice(None), slice(None)) + (slice(None, None, -1),) * nd]
    wt = np.swapaxes(wf, 0, 1).reshape(w.shape[1], -1)
    dx = (wt @ _im2col(dy, k, pad)).reshape(xshape)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def maxpool_forward(x):
    """Non-overlapping 2x max pool over every non-channel axis (sizes must be even)."""
    C, *S = x.shape
    nd = len(S)
    if any(s % 2 for s in S):
        raise ValueError(f"max-pool input {x.shape} has an odd spatial size")
    half = [s // 2 for s in S]
    r = x.reshape([C] + [v for h in half for v in (h, 2)])
    perm = [0] + [1 + 2 * i for i in range(nd)] + [2 + 2 * i for i in range(nd)]
    r = r.transpose(perm).reshape([C] + half + [2 ** nd])
    arg = r.argmax(axis=-1)
    y = np.take_along_axis(r, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg, perm)


def maxpool_backward(dy, cache):
    shape, arg, perm = cache
    C, *S = shape
    nd = len(S)
    half = [s // 2 for s in S]
    g = np.zeros([C] + half + [2 ** nd], dtype=dy.dtype)
    np.put_along_axis(g, arg[..., None], dy[..., None], axis=-1)
    g = g.reshape([C] + half + [2] * nd)
    inv = np.argsort(perm)
    return g.transpose(inv).reshape(shape)


def temporal_sum_forward(x):
    """Collapse the depth axis of ``(C, D, H, W)``."""
    return x.sum(axis=1), x.shape[1]


def temporal_sum_backward(dy, depth):
    return np.repeat(dy[:, None], depth, axis=1)


def upsample_forward(x):
    """Nearest-neighbour x2 over the last two axes."""
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1), None


def upsample_backward(dy, _cache=None):
    C, H, W = dy.shape
    return dy.reshape(C, H // 2, 2, W // 2, 2).sum(axis=(2, 4))


def concat_forward(parts):
    return np.concatenate(parts, axis=0), [p.shape[0] for p in parts]


def concat_backward(dy, sizes):
    return np.split(dy, np.cumsum(sizes)[:-1], axis=0)


def regression_forward(beta, loc, fvec, bias: bool = False):
    """Per-instance dot product of the tile coefficients with the instance features.

    beta: (B, H, W); loc: (N, 2) tile indices; fvec: (N, F) with B == F, or
    B == F + 1 when ``bias`` adds a constant feature.
    """
    loc = np.asarray(loc)
    if bias:
        fvec = np.concatenate([fvec, np.ones((len(fvec), 1))], axis=1)
    if beta.shape[0] != fvec.shape[1]:
        raise ValueError(f"{beta.shape[0]} coefficients for {fvec.shape[1]} features")
    if len(loc) and (loc.min() < 0 or loc[:, 0].max() >= beta.shape[1] or loc[:, 1].max() >= beta.shape[2]):
        raise ValueError("instance mapped outside the coefficient map")
    flat = loc[:, 0] * beta.shape[2] + loc[:, 1]
    gathered = beta.reshape(beta.shape[0], -1)[:, flat]  # (B, N)
    pred = np.einsum("bn,nb->n", gathered, fvec)
    return pred, (beta.shape, flat, fvec)


def regression_backward(dpred, cache):
    shape, flat, fvec = cache
    B, H, W = shape
    contrib = fvec * dpred[:, None]  # (N, B)
    dbeta = np.stack([np.bincount(flat, weights=contrib[:, c], minlength=H * W) for c in range(B)])
    return dbeta.reshape(shape)
