"""Seeded synthetic designs and switching vectors.

Designs are random placements with uneven cell density, lognormal power
triplets and via stacks dropped on the power-grid nodes. Toggles are
Bernoulli draws whose per-step probability mixes a uniform background with
spatio-temporal bursts, so activity clusters in a few places and times.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .design_io import DesignBundle, SliceTrace
from .features import TILE_SIZE


@dataclass(frozen=True)
class GeneratorSpec:
    width: float = 60.0
    length: float = 60.0
    num_instances: int = 2000
    num_vias: int = 64
    num_slices: int = 3
    cycles: int = 20
    substeps: int = 5
    vdd: float = 0.7
    # powers in watts: lognormal medians and a shared log-sigma
    p_internal: float = 1.6e-5
    p_switching: float = 2.4e-5
    p_leakage: float = 2e-8
    power_sigma: float = 0.5
    # fraction of cells placed in dense blobs rather than uniformly
    density_clustering: float = 0.4
    density_blobs: int = 4
    toggle_rate: float = 0.05
    clustering: float = 0.7
    bursts: int = 3
    burst_radius: float = 8.0
    burst_steps: int = 12
    pitch: float = TILE_SIZE

    def __post_init__(self):
        for name in ("width", "length"):
            v = getattr(self, name)
            if v <= 0 or abs(v / self.pitch - round(v / self.pitch)) > 1e-9:
                raise ValueError(f"{name}={v} must be a positive multiple of {self.pitch}")
        if self.num_instances <= 0:
            raise ValueError("num_instances must be positive")
        nodes = round(self.width / self.pitch) * round(self.length / self.pitch)
        if self.num_vias > nodes:
            raise ValueError(f"{self.num_vias} via stacks do not fit on {nodes} grid nodes")
        if self.num_vias < 0 or self.num_slices < 0:
            raise ValueError("counts must be non-negative")
        if not 0.0 <= self.clustering <= 1.0:
            raise ValueError("clustering must lie in [0, 1]")
        if not 0.0 <= self.toggle_rate <= 1.0:
            raise ValueError("toggle_rate must lie in [0, 1]")

    def with_(self, **kw) -> "GeneratorSpec":
        return replace(self, **kw)


def _placement(rng: np.random.Generator, spec: GeneratorSpec) -> np.ndarray:
    n = spec.num_instances
    n_blob = int(round(n * spec.density_clustering))
    uniform = rng.uniform((0.0, 0.0), (spec.width, spec.length), size=(n - n_blob, 2))
    if n_blob and spec.density_blobs:
        centers = rng.uniform((0.0, 0.0), (spec.width, spec.length), size=(spec.density_blobs, 2))
        which = rng.integers(0, spec.density_blobs, size=n_blob)
        spread = 0.12 * min(spec.width, spec.length)
        blob = centers[which] + rng.normal(0.0, spread, size=(n_blob, 2))
        # reflect back into the die
        blob = np.abs(blob)
        blob[:, 0] = spec.width - np.abs(spec.width - blob[:, 0])
        blob[:, 1] = spec.length - np.abs(spec.length - blob[:, 1])
        xy = np.concatenate([uniform, blob])
    else:
        xy = uniform
    # keep strictly inside so no point sits on a tile edge of the die boundary
    return np.clip(xy, 1e-6, [spec.width - 1e-6, spec.length - 1e-6])


def toggle_probability(rng: np.random.Generator, xy: np.ndarray, spec: GeneratorSpec) -> np.ndarray:
    """Per-instance, per-step toggle probability with mean ``toggle_rate``."""
    steps = spec.cycles * spec.substeps
    base = np.full((len(xy), steps), spec.toggle_rate)
    if spec.clustering == 0.0 or spec.bursts == 0 or spec.toggle_rate == 0.0:
        return base
    bump = np.zeros((len(xy), steps))
    for _ in range(spec.bursts):
        c = rng.uniform((0.0, 0.0), (spec.width, spec.length))
        t0 = rng.integers(0, max(1, steps - spec.burst_steps + 1))
        w = np.exp(-np.sum((xy - c) ** 2, axis=1) / (2 * spec.burst_radius ** 2))
        bump[:, t0:t0 + spec.burst_steps] += w[:, None]
    bump /= bump.mean()
    q = spec.toggle_rate * ((1.0 - spec.clustering) + spec.clustering * bump)
    return np.clip(q, 0.0, 1.0)


def generate_slices(rng: np.random.Generator, xy: np.ndarray, spec: GeneratorSpec,
                    first_id: int = 0) -> list[SliceTrace]:
    steps = spec.cycles * spec.substeps
    out = []
    for k in range(spec.num_slices):
        q = toggle_probability(rng, xy, spec)
        b = rng.random(q.shape) < q
        inst, step = np.nonzero(b)
        out.append(SliceTrace(first_id + k, steps, inst, step))
    return out


def generate_design(seed: int, spec: GeneratorSpec | None = None, **overrides) -> DesignBundle:
    """Deterministic synthetic design with ``spec.num_slices`` slices."""
    spec = (spec or GeneratorSpec()).with_(**overrides) if overrides else (spec or GeneratorSpec())
    rng = np.random.default_rng(seed)
    xy = _placement(rng, spec)
    med = np.array([spec.p_internal, spec.p_switching, spec.p_leakage])
    # one shared "size" factor per cell plus independent jitter per component
    size = rng.lognormal(0.0, spec.power_sigma, size=(len(xy), 1))
    jitter = rng.lognormal(0.0, 0.5 * spec.power_sigma, size=(len(xy), 3))
    power = med * size * jitter

    W, L = round(spec.width / spec.pitch), round(spec.length / spec.pitch)
    nodes = rng.choice(W * L, size=spec.num_vias, replace=False)
    vias = np.stack([(nodes // L + 0.5) * spec.pitch, (nodes % L + 0.5) * spec.pitch], axis=1)

    width = len(str(len(xy) - 1))
    ids = [f"g{k:0{width}d}" for k in range(len(xy))]
    slices = generate_slices(rng, xy, spec)
    return DesignBundle(spec.width, spec.length, spec.vdd, ids, xy, power, vias,
                        tuple(slices), spec.cycles, spec.substeps)


def generate_corpus(seed: int, num_designs: int, spec: GeneratorSpec | None = None) -> list[DesignBundle]:
    seeds = np.random.SeedSequence(seed).spawn(num_designs)
    return [generate_design(int(s.generate_state(1)[0]), spec) for s in seeds]


def synthetic_toggle_counts(seed: int, num_slices: int, num_instances: int,
                            quiet_fraction: float = 0.6, mean_rate: float = 0.5) -> np.ndarray:
    """``(num_slices, num_instances)`` toggle counts for a long vector.

    Most slices are nearly idle; the rest carry regional activity. Meant for
    exercising slice ranking on long vectors without materializing traces.
    """
    rng = np.random.default_rng(seed)
    activity = rng.gamma(2.0, mean_rate / 2.0, size=(num_slices, 1))
    activity[rng.random(num_slices) < quiet_fraction] *= 0.02
    # a few instance groups share a burst factor per slice
    groups = rng.integers(0, 8, size=num_instances)
    burst = rng.gamma(1.0, 1.0, size=(num_slices, 8))[:, groups]
    lam = 20.0 * activity * burst
    return rng.poisson(lam).astype(np.int32)
