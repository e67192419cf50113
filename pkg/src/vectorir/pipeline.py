"""Glue between features, the network and the golden solver.

:class:`Predictor` bundles a trained model with its normalization constants
and is what the profiler calls. The remaining helpers assemble labeled
corpora and run leave-one-design-out training.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .design_io import DesignBundle, read_weights, write_weights
from .features import (
    INSTANCE_VECTOR, NormConstants, VolumeCache, cache_key, design_digest, effective_distance,
    extract, raw_volume,
)
from .nn.model import ModelConfig, param_shapes, predict_normalized
from .nn.train import TrainParams, TrainResult, train
from .pdn import build_system, golden_dynamic_ir

log = logging.getLogger(__name__)


class Predictor:
    """Per-instance IR in volts for any (design, slice) pair.

    Extracted samples are kept in a bounded LRU cache. Calls are safe from
    several threads: the model is read-only and the caches are locked.
    """

    def __init__(self, cfg: ModelConfig, params, norm: NormConstants, cache_size: int = 16):
        self.cfg = cfg
        self.params = params
        self.norm = norm
        self.cache = VolumeCache(cache_size)
        self._r: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def sample(self, design: DesignBundle, slice_id: int):
        digest = design_digest(design)
        with self._lock:
            r = self._r.get(digest)
        if r is None:
            r = effective_distance(design.xy, design.vias)
            with self._lock:
                self._r[digest] = r
        return self.cache.get(cache_key(design, slice_id, self.norm),
                              lambda: extract(design, slice_id, self.norm, r=r))

    def predict(self, design: DesignBundle, slice_id: int) -> np.ndarray:
        return predict_normalized(self.cfg, self.params, self.sample(design, slice_id)) * self.norm.ir

    __call__ = predict

    def save(self, path) -> None:
        write_weights(path, self.cfg.to_header(), self.params, self.norm.as_dict())

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None, cache_size: int = 16) -> "Predictor":
        header, params, norm = read_weights(path, expect.to_header() if expect else None)
        cfg = ModelConfig.from_header(header)
        shapes = param_shapes(cfg)
        if set(shapes) != set(params) or any(params[k].shape != s for k, s in shapes.items()):
            raise ValueError(f"{path}: tensors do not match the {cfg.variant} architecture in its header")
        return cls(cfg, params, NormConstants.from_dict(norm), cache_size)


# ---------------------------------------------------------------------------
# labeled corpora


@dataclass
class LabeledSlice:
    design_index: int
    slice_id: int
    ir: np.ndarray  # volts, one per instance


def golden_labels(designs, slices_per_design: int | None = None) -> list[LabeledSlice]:
    out = []
    for d, design in enumerate(designs):
        grid = build_system(design)
        count = len(design.slices) if slices_per_design is None else slices_per_design
        for s in range(count):
            out.append(LabeledSlice(d, s, golden_dynamic_ir(design, s, grid).ir))
    return out


def fit_norm(designs, labels=None) -> NormConstants:
    """Channel maxima over every slice of ``designs``; IR scale from ``labels``."""
    vols = []
    for design in designs:
        r = effective_distance(design.xy, design.vias)
        vols.extend(raw_volume(design, s, r=r)[1] for s in range(len(design.slices)))
    ir_max = max(float(lab.ir.max()) for lab in labels) if labels else None
    return NormConstants.fit(vols, ir_max=ir_max, vdd=designs[0].vdd if designs else None)


def planted_weights(seed: int = 0) -> np.ndarray:
    """A fixed positive rule over the normalized instance vector."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.2, 1.0, size=len(INSTANCE_VECTOR)) / len(INSTANCE_VECTOR)


def planted_labels(designs, norm: NormConstants, w: np.ndarray, slices_per_design=None):
    """Labels ``IR_i = w . features(i)`` (normalized units), returned in volts."""
    out = []
    for d, design in enumerate(designs):
        r = effective_distance(design.xy, design.vias)
        count = len(design.slices) if slices_per_design is None else slices_per_design
        for s in range(count):
            fvec = extract(design, s, norm, r=r).fvec
            out.append(LabeledSlice(d, s, fvec @ w * norm.ir))
    return out


def make_pairs(designs, labels, norm: NormConstants):
    """``(sample, normalized target)`` pairs in label order."""
    rs = {}
    pairs = []
    for lab in labels:
        design = designs[lab.design_index]
        if lab.design_index not in rs:
            rs[lab.design_index] = effective_distance(design.xy, design.vias)
        sample = extract(design, lab.slice_id, norm, r=rs[lab.design_index])
        pairs.append((sample, lab.ir / norm.ir))
    return pairs


# ---------------------------------------------------------------------------
# leave-one-design-out


@dataclass
class Fold:
    held_out: int
    result: TrainResult
    predictor: Predictor
    test: list = field(default_factory=list)  # LabeledSlice of the held-out design
    predictions: list = field(default_factory=list)  # volts, aligned with ``test``


def split_validation(labels, held_out: int):
    """Training labels minus the last slice of each training design, which validates."""
    train_l, val_l = [], []
    last = {}
    for lab in labels:
        if lab.design_index != held_out:
            last[lab.design_index] = max(last.get(lab.design_index, -1), lab.slice_id)
    for lab in labels:
        if lab.design_index == held_out:
            continue
        multi = sum(1 for x in labels if x.design_index == lab.design_index) > 1
        (val_l if multi and lab.slice_id == last[lab.design_index] else train_l).append(lab)
    return train_l, val_l


def leave_one_out(designs, labels, cfg: ModelConfig, hyper: TrainParams | None = None,
                  norm: NormConstants | None = None, folds=None) -> list[Fold]:
    """Train one model per held-out design and predict that design's slices.

    Normalization constants are fitted on the training designs of each fold
    unless ``norm`` is given.
    """
    if len(designs) < 2:
        raise ValueError("leave-one-out needs at least two designs")
    out = []
    for k in (range(len(designs)) if folds is None else folds):
        train_l, val_l = split_validation(labels, k)
        test_l = [lab for lab in labels if lab.design_index == k]
        fold_norm = norm or fit_norm([d for j, d in enumerate(designs) if j != k],
                                     [lab for lab in labels if lab.design_index != k])
        tr = make_pairs(designs, train_l, fold_norm)
        va = make_pairs(designs, val_l, fold_norm)
        result = train(cfg, tr, hyper, va or None, ir_scale=fold_norm.ir)
        pred = Predictor(cfg, result.params, fold_norm)
        preds = [pred.predict(designs[k], lab.slice_id) for lab in test_l]
        log.info("fold %d: best epoch %d", k, result.best_epoch)
        out.append(Fold(k, result, pred, test_l, preds))
    return out
