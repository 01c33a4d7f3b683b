# coding: utf-8

# # Splitting a feature tensor across several codebooks
#
# A quantizer with one codebook of K codes can send ln K nats per vector.
# Give each of M channel slices its own codebook and the same positions
# carry M ln K nats, while the number of stored codes only grows to K*M.

import numpy as np

from dquant import Codebook, DepthwiseQuantizer, capacity, dq_forward, vq_forward
from dquant.tensor import decompose

for K in (32, 128, 512):
    for M in (1, 3, 10):
        r = capacity(K, M)
        print(f"K={K:4d} M={M:2d}  cost={r.cost:5d}  capacity={r.capacity_nats:7.3f} nats ({r.capacity_bits:5.1f} bits)")


# ## Decomposition
#
# A (C, H, W) feature map with C=10 split into M=4 slices. 10 is not a
# multiple of 4, so each slice is 3 channels wide and the last one is
# padded with two zero channels.

rng = np.random.default_rng(0)
x = rng.standard_normal((10, 4, 4))
slices, info = decompose(x, axis=0, M=4)
print([s.shape for s in slices], info)


# ## Quantizing
#
# Each slice is quantized by its own book. The codes array has one entry
# per position per book.

q = DepthwiseQuantizer.create(4, 16, 3, axis=0, rng=1)
res = dq_forward(q, x)
print("codes", res.codes.shape, "quantized", res.quantized.shape)
print("mean squared distance per vector", res.mean_distance())


# With a single book the decomposition is the identity and DQ is plain VQ.

book = Codebook(rng.standard_normal((16, 10)))
one = dq_forward(DepthwiseQuantizer([book], axis=0), x)
flat = vq_forward(book, x.reshape(10, -1).T)
print("M=1 same codes as VQ:", np.array_equal(one.codes.reshape(-1), flat.codes))
