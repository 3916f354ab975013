"""The boundary-weighted loss and a spot check of the hand-written backward pass."""
import numpy as np

from qsegment.loss import loss, weight_map
from qsegment.model import build_model, forward_float
from qsegment.train import backward

# Weights grow near vessel edges and stay at 1 inside flat regions.
gt = np.zeros((1, 1, 32, 32))
gt[..., 12:18] = 1
w = weight_map(gt, lam=5.0)
print("weight map row:", np.round(w[0, 0, 16, :], 2))

# With all-zero logits against an all-ones mask, the BCE term is ln 2.
out = loss(np.zeros((1, 1, 16, 16)), np.ones((1, 1, 16, 16)))
print(f"wbce={out.wbce:.6f} (ln2={np.log(2):.6f}) wiou={out.wiou:.6f} total={out.total:.6f}")

# Compare a few analytic gradients with central differences (float64).
model = build_model(1).astype(np.float64).set_mode("train")
rng = np.random.default_rng(0)
x = rng.random((2, 3, 16, 16))
y = (rng.random((2, 1, 16, 16)) > 0.7).astype(np.float64)
_, grads = backward(model, x, y)
params = model.named_parameters()
for name in ("b1.conv3x3.weight", "b4.bn2.gamma", "b6.dw3x3.weight", "head.bias"):
    p = params[name]
    i = tuple(int(rng.integers(s)) for s in p.shape)
    old = p[i]
    p[i] = old + 1e-6
    up = loss(forward_float(model, x), y).total
    p[i] = old - 1e-6
    dn = loss(forward_float(model, x), y).total
    p[i] = old
    print(f"{name:<20} analytic {grads[name][i]: .6e}  numeric {(up - dn) / 2e-6: .6e}")
