"""Worst-case slice recommendation for long switching vectors.

Candidate generation runs in two stages: keep the ``N_a`` slices with the
highest average power, then keep the ``N_r`` best of those per region by
regional power. Survivors are scored by predicted worst IR drop per region
and ranked greedily so that the reported slices cover as many regions as
possible.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .design_io import DesignBundle
from .features import TILE_SIZE

CYCLES_PER_SLICE = 20


@dataclass(frozen=True)
class ProfilerParams:
    n_a: int = 200
    n_r: int = 5
    n_o: int = 3
    region_w: float = 15.0
    region_l: float = 15.0
    cover_won_region_only: bool = False
    workers: int = 1

    def __post_init__(self):
        if min(self.n_a, self.n_r) <= 0 or (self.n_o is not None and self.n_o <= 0):
            raise ValueError("N_a, N_r and N_o must be positive")
        if self.n_r > self.n_a:
            raise ValueError("N_r must not exceed N_a")
        for v in (self.region_w, self.region_l):
            if v <= 0 or abs(v / TILE_SIZE - round(v / TILE_SIZE)) > 1e-9:
                raise ValueError(f"region size {v} must be a multiple of the tile size")

    def region_grid(self, width: float, length: float) -> tuple[int, int]:
        return (max(1, math.ceil(width / self.region_w - 1e-9)),
                max(1, math.ceil(length / self.region_l - 1e-9)))


def region_index(xy, width: float, length: float, params: ProfilerParams) -> np.ndarray:
    """Flat region index ``rx * L_r + ry`` of every instance."""
    Wr, Lr = params.region_grid(width, length)
    xy = np.asarray(xy).reshape(-1, 2)
    rx = np.clip(np.floor(xy[:, 0] / params.region_w).astype(np.int64), 0, Wr - 1)
    ry = np.clip(np.floor(xy[:, 1] / params.region_l).astype(np.int64), 0, Lr - 1)
    return rx * Lr + ry


def top_k(values: np.ndarray, k: int, ids: np.ndarray | None = None) -> np.ndarray:
    """Positions of the ``k`` largest values, ties to the lower id, in rank order.

    Runs in linear time plus ``k log k`` for the final sort.
    """
    values = np.asarray(values)
    n = len(values)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if k >= n:
        return np.lexsort((ids, -values))
    kth = np.partition(values, n - k)[n - k]
    above = np.flatnonzero(values > kth)
    tied = np.flatnonzero(values == kth)
    tied = tied[np.argsort(ids[tied], kind="stable")][: k - len(above)]
    keep = np.concatenate([above, tied])
    return keep[np.lexsort((ids[keep], -values[keep]))]


class SlicePower:
    """Average power ``sum_i p_l + T_c/20 * (p_s + p_i)`` of slices, with an evaluation counter."""

    def __init__(self, design: DesignBundle):
        self.leak = float(design.p_l.sum())
        self.dyn = (design.p_s + design.p_i) / CYCLES_PER_SLICE
        self.evaluations = 0

    def __call__(self, counts: np.ndarray) -> np.ndarray:
        counts = np.atleast_2d(counts)
        self.evaluations += counts.shape[0]
        return self.leak + counts @ self.dyn


def regional_power(design: DesignBundle, counts: np.ndarray, params: ProfilerParams) -> np.ndarray:
    """``(regions, slices)`` regional power for the given toggle-count rows."""
    reg = region_index(design.xy, design.width, design.length, params)
    Wr, Lr = params.region_grid(design.width, design.length)
    per_inst = design.p_l + np.atleast_2d(counts) / CYCLES_PER_SLICE * (design.p_s + design.p_i)
    out = np.zeros((Wr * Lr, per_inst.shape[0]))
    for c in range(per_inst.shape[0]):
        out[:, c] = np.bincount(reg, weights=per_inst[c], minlength=Wr * Lr)
    return out


def stage1_filter(design: DesignBundle, counts: np.ndarray, params: ProfilerParams,
                  power: SlicePower | None = None) -> np.ndarray:
    """Slice ids (row positions of ``counts``) of the ``N_a`` highest-power slices, in rank order."""
    power = power or SlicePower(design)
    p = power(counts)
    return top_k(p, params.n_a)


def stage2_filter(design: DesignBundle, counts: np.ndarray, stage1: np.ndarray,
                  params: ProfilerParams) -> np.ndarray:
    """Union of the per-region top-``N_r`` of the stage-1 slices, sorted by slice id."""
    stage1 = np.asarray(stage1)
    rp = regional_power(design, counts[stage1], params)
    keep = set()
    for r in range(rp.shape[0]):
        keep.update(stage1[top_k(rp[r], params.n_r, ids=stage1)].tolist())
    return np.array(sorted(keep), dtype=np.int64)


def region_max(values: np.ndarray, region: np.ndarray, num_regions: int) -> np.ndarray:
    out = np.zeros(num_regions)
    np.maximum.at(out, region, values)
    return out


def score_candidates(design: DesignBundle, candidates, predict, params: ProfilerParams):
    """``(N_c, regions)`` worst predicted IR per region for each candidate slice.

    ``predict(design, slice_id)`` returns per-instance IR in volts. Candidates
    whose prediction raises are reported in the returned ``failures`` dict and
    score zero; the others are unaffected.
    """
    reg = region_index(design.xy, design.width, design.length, params)
    Wr, Lr = params.region_grid(design.width, design.length)
    candidates = [int(c) for c in candidates]
    scores = np.zeros((len(candidates), Wr * Lr))
    failures: dict[int, str] = {}

    def one(k):
        c = candidates[k]
        try:
            ir = np.asarray(predict(design, c), dtype=np.float64)
        except Exception as exc:  # noqa: BLE001 - report and keep going
            return k, None, f"{type(exc).__name__}: {exc}"
        return k, region_max(ir, reg, Wr * Lr), None

    if params.workers > 1:
        with ThreadPoolExecutor(params.workers) as pool:
            results = list(pool.map(one, range(len(candidates))))
    else:
        results = [one(k) for k in range(len(candidates))]
    for k, row, err in results:
        if err is None:
            scores[k] = row
        else:
            failures[candidates[k]] = err
    return scores, failures


@dataclass
class Recommendation:
    picks: list  # (region, slice_id, score) in selection order
    ir_maps: dict  # slice_id -> per-region score row
    covered: np.ndarray  # bool per region

    @property
    def slice_ids(self) -> list[int]:
        return [s for _, s, _ in self.picks]


def rank_with_coverage(scores: np.ndarray, slice_ids, params: ProfilerParams | None = None,
                       n_o: int | None = None) -> Recommendation:
    """Greedy coverage ranking over ``(region, slice)`` pairs.

    Pairs are visited by score descending, then slice id, then region. A pair
    is taken when its region is uncovered and its slice not yet chosen; the
    chosen slice then covers every region where it attains the regional
    maximum (or only the won region with ``cover_won_region_only``).
    """
    params = params or ProfilerParams()
    scores = np.asarray(scores, dtype=np.float64)
    slice_ids = np.asarray(slice_ids, dtype=np.int64)
    if scores.size == 0:
        raise ValueError("empty score table")
    limit = params.n_o if n_o is None else n_o
    if limit is None or limit <= 0:
        limit = len(slice_ids)
    nc, nr = scores.shape
    best = scores.max(axis=0)
    cand = np.repeat(np.arange(nc), nr)
    region = np.tile(np.arange(nr), nc)
    flat = scores.reshape(-1)
    order = np.lexsort((region, slice_ids[cand], -flat))
    covered = np.zeros(nr, dtype=bool)
    chosen = np.zeros(nc, dtype=bool)
    picks = []
    maps = {}
    for pos in order:
        if len(picks) >= limit or covered.all():
            break
        c, r = cand[pos], region[pos]
        if covered[r] or chosen[c]:
            continue
        chosen[c] = True
        picks.append((int(r), int(slice_ids[c]), float(flat[pos])))
        maps[int(slice_ids[c])] = scores[c].copy()
        covered[r] = True
        if not params.cover_won_region_only:
            covered |= scores[c] == best
    return Recommendation(picks, maps, covered)


@dataclass
class ProfileReport:
    recommendation: Recommendation
    stage1: np.ndarray
    candidates: np.ndarray
    scores: np.ndarray
    timings: dict = field(default_factory=dict)
    slice_power_evaluations: int = 0
    failures: dict = field(default_factory=dict)

    @property
    def n_c(self) -> int:
        return len(self.candidates)

    @property
    def covered_regions(self) -> int:
        return int(self.recommendation.covered.sum())

    @property
    def uncovered_regions(self) -> int:
        return int((~self.recommendation.covered).sum())


def generate_candidates(design: DesignBundle, counts, params: ProfilerParams):
    """Both candidate-generation stages; returns ``(stage1, candidates, evaluations)``."""
    power = SlicePower(design)
    s1 = stage1_filter(design, counts, params, power)
    return s1, stage2_filter(design, counts, s1, params), power.evaluations


def profile_vector(design: DesignBundle, predict, params: ProfilerParams | None = None,
                   counts: np.ndarray | None = None) -> ProfileReport:
    """Stage 1, stage 2, scoring and ranking over every slice of ``design``.

    ``counts`` defaults to the per-instance toggle counts of the design's own
    slices; row ``c`` must describe slice id ``c``.
    """
    params = params or ProfilerParams()
    if counts is None:
        counts = np.stack([s.toggle_counts(design.num_instances) for s in design.slices])
    t0 = time.perf_counter()
    power = SlicePower(design)
    s1 = stage1_filter(design, counts, params, power)
    t1 = time.perf_counter()
    cands = stage2_filter(design, counts, s1, params)
    t2 = time.perf_counter()
    scores, failures = score_candidates(design, cands, predict, params)
    t3 = time.perf_counter()
    ok = np.array([c not in failures for c in cands.tolist()], dtype=bool)
    rec = rank_with_coverage(scores[ok], cands[ok], params)
    t4 = time.perf_counter()
    return ProfileReport(
        rec, s1, cands, scores,
        timings={"stage1": t1 - t0, "stage2": t2 - t1, "score": t3 - t2, "rank": t4 - t3},
        slice_power_evaluations=power.evaluations, failures=failures,
    )


def write_report(report: ProfileReport, design: DesignBundle, params: ProfilerParams, path) -> None:
    """CSV ``rank, slice_id, region_x, region_y, score_mV``."""
    _, Lr = params.region_grid(design.width, design.length)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "slice_id", "region_x", "region_y", "score_mV"])
        for rank, (r, s, score) in enumerate(report.recommendation.picks, start=1):
            w.writerow([rank, s, r // Lr, r % Lr, repr(score * 1e3)])
