"""Instance- and tile-level feature extraction.

Per instance: effective distance ``r`` to nearby via stacks, toggle rate
``tau``, toggle-rate-scaled power ``p_r``, total power ``p_tot``, overlap
power ``p_ol`` and the per-step power series ``p_t``.

Per tile (2.5 um square by default): ``n*t`` temporal power maps followed by
seven spatial maps in the order of :data:`SPATIAL_CHANNELS`.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .design_io import DesignBundle, SliceTrace

TILE_SIZE = 2.5
NEIGHBORHOOD = 5.0
R_MAX = 5.0
D_MIN = 0.05

SPATIAL_CHANNELS = ("p_i", "p_l", "p_s", "p_r", "p_ol", "p_tot", "r")
INSTANCE_VECTOR = ("p_i", "p_l", "p_s", "p_r", "p_ol", "p_tot", "r", "p_t_max")


def effective_distance(xy, vias, radius: float = NEIGHBORHOOD, d_min: float = D_MIN,
                       r_max: float = R_MAX) -> np.ndarray:
    """Harmonic combination ``1/r = sum 1/d_k`` over vias within ``radius``.

    Distances are clamped below at ``d_min``; an instance with no via in
    range gets ``r_max``. Accepts a single ``(x, y)`` point or an ``(N, 2)``
    array.
    """
    xy = np.asarray(xy, dtype=np.float64)
    single = xy.ndim == 1
    xy = xy.reshape(-1, 2)
    vias = np.asarray(vias, dtype=np.float64).reshape(-1, 2)
    inv = np.zeros(len(xy))
    if len(vias):
        chunk = max(1, 2_000_000 // len(vias))
        for start in range(0, len(xy), chunk):
            part = xy[start:start + chunk]
            d = np.hypot(part[:, None, 0] - vias[None, :, 0], part[:, None, 1] - vias[None, :, 1])
            near = d <= radius
            inv[start:start + chunk] = np.where(near, 1.0 / np.maximum(d, d_min), 0.0).sum(axis=1)
    with np.errstate(divide="ignore"):
        r = np.where(inv > 0, 1.0 / inv, r_max)
    return float(r[0]) if single else r


def derive_powers(p_i, p_s, p_l, tau):
    """Return ``(p_r, p_tot)``: ``p_l + tau*(p_s + p_i)`` and ``p_l + p_s + p_i``."""
    p_i, p_s, p_l, tau = (np.asarray(v, dtype=np.float64) for v in (p_i, p_s, p_l, tau))
    return p_l + tau * (p_s + p_i), p_l + p_s + p_i


def temporal_power(p_i, p_s, p_l, toggled) -> np.ndarray:
    """Per-step power ``p_l + b_j*(p_i + p_s)``.

    ``toggled`` is a boolean array whose last axis is time; powers broadcast
    against its leading axes.
    """
    b = np.asarray(toggled, dtype=bool)
    p_l = np.asarray(p_l, dtype=np.float64)[..., None]
    dyn = (np.asarray(p_i, dtype=np.float64) + np.asarray(p_s, dtype=np.float64))[..., None]
    return p_l + b * dyn


def grid_shape(width: float, length: float, tile: float = TILE_SIZE) -> tuple[int, int]:
    return max(1, math.ceil(width / tile - 1e-9)), max(1, math.ceil(length / tile - 1e-9))


def location_matrix(xy, width: float, length: float, tile: float = TILE_SIZE) -> np.ndarray:
    """Tile index ``(ix, iy)`` of every instance; half-open tiles, max edge to the last tile."""
    W, L = grid_shape(width, length, tile)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    ix = np.clip(np.floor(xy[:, 0] / tile).astype(np.int64), 0, W - 1)
    iy = np.clip(np.floor(xy[:, 1] / tile).astype(np.int64), 0, L - 1)
    return np.stack([ix, iy], axis=1)


def neighbor_pairs(loc: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs ``(a, b)``, ``a != b``, of instances in the same or adjacent tiles."""
    W, L = shape
    key = loc[:, 0] * L + loc[:, 1]
    order = np.argsort(key, kind="stable")
    counts = np.bincount(key, minlength=W * L)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    src, dst = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            nx, ny = loc[:, 0] + dx, loc[:, 1] + dy
            ok = (nx >= 0) & (nx < W) & (ny >= 0) & (ny < L)
            a = np.flatnonzero(ok)
            nkey = nx[ok] * L + ny[ok]
            c = counts[nkey]
            a = np.repeat(a, c)
            offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
            b = order[np.repeat(starts[nkey], c) + offs]
            src.append(a)
            dst.append(b)
    a = np.concatenate(src) if src else np.empty(0, np.int64)
    b = np.concatenate(dst) if dst else np.empty(0, np.int64)
    keep = a != b
    return a[keep], b[keep]


def overlap_power(p_r, toggled, loc, shape) -> np.ndarray:
    """Sum of ``p_r`` over spatial neighbours whose toggle steps intersect the instance's."""
    p_r = np.asarray(p_r, dtype=np.float64)
    toggled = np.asarray(toggled, dtype=bool)
    active = toggled.any(axis=1)
    out = np.zeros(len(p_r))
    if active.sum() < 2:
        return out
    idx = np.flatnonzero(active)
    a, b = neighbor_pairs(loc[idx], shape)
    packed = np.packbits(toggled[idx], axis=1)
    hit = (packed[a] & packed[b]).any(axis=1)
    np.add.at(out, idx[a[hit]], p_r[idx[b[hit]]])
    return out


@dataclass(frozen=True, eq=False)
class InstanceFeatures:
    """Arrays over the instances of one design under one slice."""

    r: np.ndarray
    tau: np.ndarray
    p_i: np.ndarray
    p_s: np.ndarray
    p_l: np.ndarray
    p_r: np.ndarray
    p_tot: np.ndarray
    p_ol: np.ndarray
    p_t: np.ndarray  # (N, n*t)
    loc: np.ndarray  # (N, 2) tile indices

    @property
    def p_t_max(self) -> np.ndarray:
        return self.p_t.max(axis=1)


def instance_features(design: DesignBundle, trace: SliceTrace | int, r=None,
                      tile: float = TILE_SIZE) -> InstanceFeatures:
    """Compute every instance-level feature for one slice.

    ``r`` may be passed in when it has already been computed for the design,
    since it does not depend on the slice.
    """
    if isinstance(trace, (int, np.integer)):
        trace = design.slices[int(trace)]
    n = design.num_instances
    b = trace.toggle_matrix(n)
    tau = b.sum(axis=1) / b.shape[1]
    if r is None:
        r = effective_distance(design.xy, design.vias)
    p_r, p_tot = derive_powers(design.p_i, design.p_s, design.p_l, tau)
    loc = location_matrix(design.xy, design.width, design.length, tile)
    shape = grid_shape(design.width, design.length, tile)
    p_ol = overlap_power(p_r, b, loc, shape)
    p_t = temporal_power(design.p_i, design.p_s, design.p_l, b)
    return InstanceFeatures(
        r=np.asarray(r, dtype=np.float64), tau=tau, p_i=design.p_i, p_s=design.p_s,
        p_l=design.p_l, p_r=p_r, p_tot=p_tot, p_ol=p_ol, p_t=p_t, loc=loc,
    )


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    """Tile maps: ``temporal`` is ``(n*t, W, L)``, ``spatial`` is ``(7, W, L)``."""

    temporal: np.ndarray
    spatial: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.spatial.shape[1:]

    @property
    def num_channels(self) -> int:
        return self.temporal.shape[0] + self.spatial.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.temporal, self.spatial], axis=0)

    def channel(self, name: str) -> np.ndarray:
        return self.spatial[SPATIAL_CHANNELS.index(name)]

    def __eq__(self, other):
        if not isinstance(other, FeatureVolume):
            return NotImplemented
        return (self.normalized == other.normalized
                and np.array_equal(self.temporal, other.temporal)
                and np.array_equal(self.spatial, other.spatial))

    __hash__ = None


def build_tile_maps(feats: InstanceFeatures, shape: tuple[int, int],
                    trace: SliceTrace | None = None) -> FeatureVolume:
    """Sum power features per tile, take the max ``r`` per tile (0 when empty).

    With ``trace`` the temporal maps are accumulated from the sparse toggle
    pairs instead of the dense ``p_t`` matrix; both give identical sums up to
    float association.
    """
    W, L = shape
    flat = feats.loc[:, 0] * L + feats.loc[:, 1]
    size = W * L

    def tsum(v):
        return np.bincount(flat, weights=v, minlength=size).reshape(W, L)

    r_map = np.zeros(size)
    np.maximum.at(r_map, flat, feats.r)
    spatial = np.stack([
        tsum(feats.p_i), tsum(feats.p_l), tsum(feats.p_s), tsum(feats.p_r),
        tsum(feats.p_ol), tsum(feats.p_tot), r_map.reshape(W, L),
    ])
    steps = feats.p_t.shape[1]
    if trace is None:
        temporal = np.stack([tsum(feats.p_t[:, j]) for j in range(steps)])
    else:
        temporal = np.broadcast_to(tsum(feats.p_l), (steps, W, L)).copy()
        dyn = (feats.p_i + feats.p_s)[trace.inst]
        np.add.at(temporal.reshape(steps, size), (trace.step, flat[trace.inst]), dyn)
    return FeatureVolume(temporal=temporal, spatial=spatial)


@dataclass(frozen=True)
class NormConstants:
    """Positive per-channel scale constants; ``p_t`` covers every temporal map."""

    p_i: float = 1.0
    p_l: float = 1.0
    p_s: float = 1.0
    p_r: float = 1.0
    p_ol: float = 1.0
    p_tot: float = 1.0
    r: float = R_MAX
    p_t: float = 1.0
    ir: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"normalization constant {f.name}={v} must be positive")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "NormConstants":
        return cls(**{k: float(v) for k, v in d.items() if k in {f.name for f in fields(cls)}})

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def fit(cls, volumes, ir_max: float | None = None, vdd: float | None = None) -> "NormConstants":
        """Constants from a training corpus: channel maxima over all raw volumes.

        The IR constant is ``ir_max`` when given, else ``vdd``, else 1.
        """
        peaks = {name: 0.0 for name in SPATIAL_CHANNELS}
        peaks["p_t"] = 0.0
        for vol in volumes:
            for k, name in enumerate(SPATIAL_CHANNELS):
                peaks[name] = max(peaks[name], float(vol.spatial[k].max()))
            peaks["p_t"] = max(peaks["p_t"], float(vol.temporal.max()))
        kw = {k: (v if v > 0 else 1.0) for k, v in peaks.items()}
        kw["r"] = R_MAX
        kw["ir"] = ir_max if ir_max else (vdd if vdd else 1.0)
        return cls(**kw)


def normalize(volume: FeatureVolume, norm: NormConstants) -> FeatureVolume:
    """Divide each channel by its constant and clamp to [0, 1]."""
    scale = np.array([getattr(norm, name) for name in SPATIAL_CHANNELS])
    spatial = np.clip(volume.spatial / scale[:, None, None], 0.0, 1.0)
    temporal = np.clip(volume.temporal / norm.p_t, 0.0, 1.0)
    return FeatureVolume(temporal=temporal, spatial=spatial, normalized=True)


def instance_feature_vectors(feats: InstanceFeatures, norm: NormConstants) -> np.ndarray:
    """``(N, 8)`` normalized vectors in :data:`INSTANCE_VECTOR` order."""
    cols = [getattr(feats, name) for name in INSTANCE_VECTOR]
    scale = np.array([getattr(norm, "p_t" if name == "p_t_max" else name) for name in INSTANCE_VECTOR])
    return np.clip(np.stack(cols, axis=1) / scale, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Sample:
    """Everything the model needs for one (design, slice) pair."""

    volume: FeatureVolume  # normalized
    loc: np.ndarray
    fvec: np.ndarray
    slice_id: int = 0


def raw_volume(design: DesignBundle, slice_id: int, r=None):
    trace = design.slices[slice_id]
    feats = instance_features(design, trace, r=r)
    vol = build_tile_maps(feats, grid_shape(design.width, design.length), trace)
    return feats, vol


def extract(design: DesignBundle, slice_id: int, norm: NormConstants, r=None) -> Sample:
    feats, vol = raw_volume(design, slice_id, r=r)
    return Sample(normalize(vol, norm), feats.loc, instance_feature_vectors(feats, norm), slice_id)


# ---------------------------------------------------------------------------
# caching


def design_digest(design: DesignBundle) -> str:
    h = hashlib.sha256()
    h.update(repr((design.width, design.length, design.vdd, design.cycles, design.substeps)).encode())
    h.update("\n".join(design.ids).encode())
    for arr in (design.xy, design.power, design.vias):
        h.update(np.ascontiguousarray(arr).tobytes())
    for s in design.slices:
        h.update(s.inst.tobytes())
        h.update(s.step.tobytes())
    return h.hexdigest()[:16]


def cache_key(design: DesignBundle, slice_id: int, norm: NormConstants) -> str:
    return f"{design_digest(design)}-s{slice_id}-n{design.cycles}-t{design.substeps}-{norm.digest()}"


def save_volume(volume: FeatureVolume, directory, key: str = "") -> Path:
    """One CSV per channel plus ``manifest.json`` listing them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = [f"t{j:03d}" for j in range(volume.temporal.shape[0])] + list(SPATIAL_CHANNELS)
    for name, chan in zip(names, volume.stacked()):
        with open(d / f"{name}.csv", "w", encoding="utf-8") as fh:
            for row in chan.tolist():
                fh.write(",".join(repr(v) for v in row) + "\n")
    manifest = {"key": key, "channels": names, "shape": list(volume.shape),
                "normalized": volume.normalized}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_volume(directory) -> FeatureVolume:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    W, L = manifest["shape"]
    chans = [np.loadtxt(d / f"{name}.csv", delimiter=",", ndmin=2).reshape(W, L)
             for name in manifest["channels"]]
    nspatial = len(SPATIAL_CHANNELS)
    arr = np.stack(chans)
    return FeatureVolume(arr[:-nspatial], arr[-nspatial:], bool(manifest["normalized"]))


class VolumeCache:
    """Bounded LRU of extracted samples, safe to share between threads.

    Values are built outside the lock, so two threads missing on the same key
    may both build it; the first insert wins.
    """

    def __init__(self, capacity: int = 16):
        self.capacity = capacity
        self._items: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = self.misses = 0

    def get(self, key, build):
        with self._lock:
            if key in self._items:
                self.hits += 1
                self._items.move_to_end(key)
                return self._items[key]
            self.misses += 1
        value = build()
        with self._lock:
            if self.capacity > 0:
                value = self._items.setdefault(key, value)
                self._items.move_to_end(key)
                while len(self._items) > self.capacity:
                    self._items.popitem(last=False)
        return value

    def __contains__(self, key):
        with self._lock:
            return key in self._items

    def __len__(self):
        return len(self._items)
