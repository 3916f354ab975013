"""Dice, accuracy and ROC-AUC on a trained model's validation predictions.

    python demos/06_metrics.py demo_best.qsm
"""
import sys

from qsegment.data import batch, synthetic_index
from qsegment.metrics import evaluate
from qsegment.qsm import load_model
from qsegment.train import predict_probs

model = load_model(sys.argv[1] if len(sys.argv) > 1 else "demo_best.qsm")
x, y = batch(synthetic_index(seed=0, hw=(64, 64)).val_samples())
report = evaluate(predict_probs(model, x), y, threshold=0.5)
print(report.to_json())

# Raising the threshold trades false positives for false negatives.
for t in (0.3, 0.5, 0.7):
    r = evaluate(predict_probs(model, x), y, threshold=t)
    print(f"threshold {t}: dice {r.dice:.4f}  fp {r.fp}  fn {r.fn}")
