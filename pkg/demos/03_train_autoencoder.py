# coding: utf-8

# # A small two-level DQ autoencoder
#
# Trains on 16x16 synthetic grayscale images for a few hundred steps and
# then looks at what the codes learned. Takes about a minute on one core.

import math

import numpy as np

from dquant import DQAE, DqaeConfig, evaluate, train
from dquant.info import mean_off_diagonal, pairwise_mi_matrix
from dquant.synthetic import synthetic_images

train_imgs = synthetic_images(1024, 16, 1, seed=0, detail=20)
test_imgs = synthetic_images(256, 16, 1, seed=1, detail=20)

cfg = DqaeConfig(num_levels=2, K=[128, 128], M=5, D=4, in_channels=1, image_size=16,
                 width=32, batch_size=16, lr=1e-3, dead_every=20, seed=0)
model = DQAE(cfg)
train(model, train_imgs, 600, log=lambda m: print(f"step {m.step:4d}  rec {m.reconstruction:.5f}  "
                                                  f"H {[round(h, 2) for h in m.entropy]}"))

ev = evaluate(model, test_imgs)
print("test MSE", ev.mse)


# ## Code usage
#
# Entropy per level next to its maximum ln K, and the mean mutual
# information between the M code streams of a level. Low MI means the
# books ended up describing different things.

for level, codes in enumerate(ev.codes):
    flat = codes.reshape(-1, cfg.M)
    mi = pairwise_mi_matrix(list(flat.T), cfg.level_K(level))
    print(f"level {level}: grid {codes.shape[1:3]}, H {ev.level_entropy[level]:.2f} / {math.log(128):.2f} nats, "
          f"mean MI {mean_off_diagonal(mi):.3f}")


# ## Dropping a level
#
# Zeroing one level's quantized stream shows what it contributes.

for level in range(cfg.num_levels):
    print(f"zero level {level}: MSE {evaluate(model, test_imgs, zero_levels=(level,)).mse:.5f}")
