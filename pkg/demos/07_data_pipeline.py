"""Synthetic vessels, the augmentation chain, and PNG export."""
import numpy as np

from qsegment.data import augment, export_png, synth_vessels

samples = synth_vessels(seed=3, count=4, hw=(64, 64))
for s in samples:
    print(f"{s.id}: foreground {s.mask.mean():.3f}, image range [{s.image.min():.2f}, {s.image.max():.2f}]")

# brightness jitter, flips and a rotation of at most one degree
rng = np.random.default_rng(0)
a = augment(samples[0], rng)
print("augmented mask still binary:", set(np.unique(a.mask)) <= {0.0, 1.0})
print("foreground before/after:", int(samples[0].mask.sum()), int(a.mask.sum()))

paths = export_png(samples, "demo_pngs")
print("wrote", len(paths), "files, first:", paths[0])
