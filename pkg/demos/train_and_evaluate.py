"""
Training the IR predictor on oracle labels
==========================================

Three small designs: train on two, predict the third, and compare the
predictions with the oracle using the tile-level hotspot metrics.
Reduced channel widths keep this to a few minutes on one core.
"""

import numpy as np

from vectorir.features import grid_shape, location_matrix
from vectorir.metrics import evaluate, rmse_mae
from vectorir.nn.model import ModelConfig
from vectorir.nn.train import TrainParams
from vectorir.pipeline import golden_labels, leave_one_out
from vectorir.synth import GeneratorSpec, generate_corpus

spec = GeneratorSpec(width=40.0, length=40.0, num_instances=1200, num_vias=25, num_slices=3)
designs = generate_corpus(3, 3, spec)
labels = golden_labels(designs)

cfg = ModelConfig(enc=(8, 16, 16, 16), dec=(16, 16, 8))
fold = leave_one_out(designs, labels, cfg, TrainParams(epochs=60, patience=15), folds=[0])[0]
print(f"best epoch {fold.result.best_epoch} of {len(fold.result.log)}")

held = designs[fold.held_out]
gold = [lab.ir for lab in fold.test]
rmse = rmse_mae(np.concatenate(fold.predictions), np.concatenate(gold))[0]
spread = np.concatenate(gold).std()
print(f"held-out RMSE {rmse * 1e3:.3f} mV, label std {spread * 1e3:.3f} mV")

report = evaluate(fold.predictions, gold, location_matrix(held.xy, held.width, held.length),
                  grid_shape(held.width, held.length))
for name, value in report.rows():
    print(f"  {name:16s} {value}")

# the trained model can be saved and reloaded by the command line tools
fold.predictor.save("demo_model.weights")
