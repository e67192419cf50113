"""U-Net predicting per-tile regression coefficients.

``temporal3d``: the encoder runs four 3x3x3 convolutions with three 2x2x2 max
pools over a ``(time, x, y)`` volume. Input channel 0 is the per-step power
map; channels 1..7 are the spatial maps replicated along time. At every skip
(and at the bottleneck) the embedding is summed over time before it meets
the 2D decoder.

``vanilla2d``: same decoder and head, but the encoder uses 2D 3x3
convolutions over all ``n*t + 7`` maps stacked as channels.

The decoder upsamples three times (nearest x2), concatenates the matching
skip and applies a 3x3 convolution; a fourth 3x3 convolution emits the
coefficient map with identity activation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..features import FeatureVolume
from . import layers as L

VARIANTS = ("temporal3d", "vanilla2d")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "temporal3d"
    cycles: int = 20
    substeps: int = 5
    enc: tuple = (16, 32, 64, 64)
    dec: tuple = (64, 32, 16)
    beta: int = 8
    bias: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.enc) != 4 or len(self.dec) != 3:
            raise ValueError("need 4 encoder widths and 3 hidden decoder widths")
        object.__setattr__(self, "enc", tuple(int(v) for v in self.enc))
        object.__setattr__(self, "dec", tuple(int(v) for v in self.dec))

    @property
    def steps(self) -> int:
        return self.cycles * self.substeps

    @property
    def out_channels(self) -> int:
        return self.beta + (1 if self.bias else 0)

    def to_header(self) -> dict[str, str]:
        return {
            "variant": self.variant,
            "n": str(self.cycles),
            "t": str(self.substeps),
            "enc": ",".join(map(str, self.enc)),
            "dec": ",".join(map(str, self.dec + (self.out_channels,))),
            "beta": str(self.beta),
            "bias": str(int(self.bias)),
            "kernel": "3",
        }

    @classmethod
    def from_header(cls, h) -> "ModelConfig":
        dec = tuple(int(v) for v in h["dec"].split(","))
        return cls(
            variant=h["variant"], cycles=int(h["n"]), substeps=int(h["t"]),
            enc=tuple(int(v) for v in h["enc"].split(",")), dec=dec[:3],
            beta=int(h["beta"]), bias=bool(int(h["bias"])),
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    if cfg.variant == "temporal3d":
        cin = 1 + 7
        kern = (3, 3, 3)
    else:
        cin = cfg.steps + 7
        kern = (3, 3)
    for k, c in enumerate(cfg.enc):
        shapes[f"enc{k}.w"] = (c, cin) + kern
        shapes[f"enc{k}.b"] = (c,)
        cin = c
    skips = cfg.enc[2::-1]
    for k, c in enumerate(cfg.dec):
        shapes[f"dec{k}.w"] = (c, cin + skips[k], 3, 3)
        shapes[f"dec{k}.b"] = (c,)
        cin = c
    shapes["head.w"] = (cfg.out_channels, cin, 3, 3)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform fan-in initialisation, biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(3.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def count_params(params) -> int:
    return int(sum(p.size for p in params.values()))


def _round_up(v: int, m: int) -> int:
    return -(-v // m) * m


def prepare_input(cfg: ModelConfig, volume: FeatureVolume | np.ndarray) -> np.ndarray:
    """Arrange a normalized volume for the encoder, zero-padded to multiples of 8."""
    if isinstance(volume, FeatureVolume):
        temporal, spatial = volume.temporal, volume.spatial
    else:
        temporal, spatial = volume[:-7], volume[-7:]
    if temporal.shape[0] != cfg.steps or spatial.shape[0] != 7:
        raise ValueError(
            f"volume has {temporal.shape[0]}+{spatial.shape[0]} channels, "
            f"model expects {cfg.steps}+7"
        )
    H, W = spatial.shape[1:]
    Hp, Wp = _round_up(H, 8), _round_up(W, 8)
    if cfg.variant == "temporal3d":
        D = temporal.shape[0]
        Dp = _round_up(D, 8)
        x = np.zeros((8, Dp, Hp, Wp))
        x[0, :D, :H, :W] = temporal
        x[1:, :D, :H, :W] = spatial[:, None]
    else:
        x = np.zeros((cfg.steps + 7, Hp, Wp))
        x[:cfg.steps, :H, :W] = temporal
        x[cfg.steps:, :H, :W] = spatial
    return x


def forward(cfg: ModelConfig, params, volume, keep: bool = False):
    """Coefficient map ``(B, H, W)`` for one normalized volume.

    With ``keep`` the intermediate caches are returned for :func:`backward`.
    """
    if isinstance(volume, FeatureVolume):
        H, W = volume.shape
    else:
        H, W = volume.shape[-2:]
    x = prepare_input(cfg, volume)
    caches = []
    skips = []
    h = x
    for k in range(4):
        z, cc = L.conv_forward(h, params[f"enc{k}.w"], params[f"enc{k}.b"])
        a, rc = L.relu_forward(z)
        if cfg.variant == "temporal3d":
            s, tc = L.temporal_sum_forward(a)
        else:
            s, tc = a, None
        skips.append(s)
        caches.append((cc, rc, tc))
        if k < 3:
            h, pc = L.maxpool_forward(a)
            caches[-1] = caches[-1] + (pc,)
        else:
            h = s
    dcaches = []
    for k in range(3):
        u, _ = L.upsample_forward(h)
        c, cat = L.concat_forward([u, skips[2 - k]])
        z, cc = L.conv_forward(c, params[f"dec{k}.w"], params[f"dec{k}.b"])
        h, rc = L.relu_forward(z)
        dcaches.append((cat, cc, rc))
    out, hc = L.conv_forward(h, params["head.w"], params["head.b"])
    beta = out[:, :H, :W]
    if not np.all(np.isfinite(beta)):
        raise FloatingPointError("non-finite coefficients in forward pass")
    if not keep:
        return beta
    return beta, (caches, dcaches, hc, out.shape)


def backward(cfg: ModelConfig, cache, dbeta) -> dict[str, np.ndarray]:
    caches, dcaches, hc, out_shape = cache
    grads = {}
    dout = np.zeros(out_shape)
    dout[:, :dbeta.shape[1], :dbeta.shape[2]] = dbeta
    dh, grads["head.w"], grads["head.b"] = L.conv_backward(dout, hc)
    dskips = [None, None, None]
    for k in reversed(range(3)):
        cat, cc, rc = dcaches[k]
        dz = L.relu_backward(dh, rc)
        dc, grads[f"dec{k}.w"], grads[f"dec{k}.b"] = L.conv_backward(dz, cc)
        du, dskips[2 - k] = L.concat_backward(dc, cat)
        dh = L.upsample_backward(du)
    # dh is now the gradient w.r.t. the bottleneck (temporal-summed enc3 output)
    dnext = None
    for k in reversed(range(4)):
        cc, rc, tc = caches[k][:3]
        ds = dh if k == 3 else dskips[k]
        da = L.temporal_sum_backward(ds, tc) if cfg.variant == "temporal3d" else ds
        if k < 3:
            da = da + L.maxpool_backward(dnext, caches[k][3])
        dz = L.relu_backward(da, rc)
        dnext, grads[f"enc{k}.w"], grads[f"enc{k}.b"] = L.conv_backward(dz, cc, need_dx=k > 0)
    return grads


def activation_pattern(cache) -> bytes:
    """Digest of every ReLU mask and max-pool choice recorded in a forward cache.

    Two parameter settings with equal patterns lie in the same linear piece of
    the network, where finite differences are a valid gradient oracle.
    """
    caches, dcaches, _, _ = cache
    h = hashlib.sha1()
    for c in caches:
        h.update(np.packbits(c[1]).tobytes())
        if len(c) > 3:
            h.update(c[3][1].astype(np.int8).tobytes())
    for c in dcaches:
        h.update(np.packbits(c[2]).tobytes())
    return h.digest()


def predict_normalized(cfg: ModelConfig, params, sample, keep: bool = False):
    """Per-instance IR in normalized units for one :class:`~vectorir.features.Sample`."""
    out = forward(cfg, params, sample.volume, keep=keep)
    beta, fcache = (out if keep else (out, None))
    pred, rcache = L.regression_forward(beta, sample.loc, sample.fvec, bias=cfg.bias)
    if keep:
        return pred, (fcache, rcache)
    return pred
