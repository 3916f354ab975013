"""Post-training int8 quantization of a trained checkpoint.

    python demos/05_quantize.py demo_best.qsm
"""
import sys

import numpy as np

from qsegment.data import batch, synthetic_index
from qsegment.metrics import dice_between
from qsegment.model import forward_float
from qsegment.qsm import load_model, save_model
from qsegment.quant import forward_quantized, quantize_pipeline

model = load_model(sys.argv[1] if len(sys.argv) > 1 else "demo_best.qsm")
data = synthetic_index(seed=0, hw=(64, 64))

# BN folding, min/max calibration on 8 images, then per-channel int8 weights
calib = batch(data.train_samples()[:8])[0]
q = quantize_pipeline(model, calib)
print("int8 file:", save_model(q, "demo_int8.qsm"), "bytes")

site = q.quant.sites["b1.out"]
print(f"b1.out is stored as int8 with scale {site.scale:.5f} and zero point {site.zero_point}")
conv = q.quant.convs["b1.conv3x3"]
print("first requant multiplier/shift:", int(conv.multiplier[0]), int(conv.shift[0]))

# Everything between the input and the head stays int8.
trace = []
x, _ = batch(data.val_samples())
lq = forward_quantized(q, x, trace=trace)
print("trace dtypes:", sorted({a.dtype.name for _, a in trace}), f"({len(trace)} steps)")

lf = forward_float(model, x)
print(f"mask Dice float vs int8: {dice_between(lq >= 0, (lf >= 0).astype(float)):.4f}")
print(f"mean |logit difference|: {np.mean(np.abs(lf - lq)):.3f}")
