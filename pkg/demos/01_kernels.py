"""Tour of the tensor kernels on tiny arrays you can check by eye."""
import numpy as np

from qsegment import tensor as T

# A 3x3 box filter over a 3x3 image of ones, zero padded: corners see 4
# pixels, edges 6, the centre 9.
x = np.ones((1, 1, 3, 3))
box = T.ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), stride=1, padding=1)
print("box filter:\n", T.conv2d(x, box)[0, 0])

# Depthwise: groups == channels, every channel keeps its own filter.
rng = np.random.default_rng(0)
x = rng.standard_normal((1, 4, 6, 6))
dw = T.ConvParams(rng.standard_normal((4, 1, 3, 3)), None, padding=1, groups=4)
print("depthwise output shape", T.conv2d(x, dw).shape)

# Max-pool remembers where each maximum came from (flat row*w+col index).
# Unpooling scatters the values back there and leaves zeros elsewhere.
img = np.array([[[[1.0, 2.0, 0.0, 0.0],
                  [3.0, 4.0, 0.0, 5.0],
                  [0.0, 0.0, 7.0, 0.0],
                  [6.0, 0.0, 0.0, 0.0]]]])
pooled, idx = T.maxpool2x2(img)
print("pooled:\n", pooled[0, 0])
print("indices:\n", idx[0, 0])
print("unpooled:\n", T.max_unpool2x2(pooled, idx, (4, 4))[0, 0])

# Ties go to the first position in the window, i.e. the top-left.
_, tie_idx = T.maxpool2x2(np.zeros((1, 1, 2, 2)))
print("tie index:", tie_idx.item())

# "same" average pooling divides by the number of pixels actually inside
# the window, so a constant image stays constant right up to the border.
flat = np.full((1, 1, 5, 7), 0.3)
print("avgpool keeps constants:", np.allclose(T.avgpool_same(flat, 31), flat))
