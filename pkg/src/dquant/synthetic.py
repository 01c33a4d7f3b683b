"""Synthetic data: channel-redundant feature tensors and small images.

Feature tensors stand in for CNN activations with correlated channels.
Channels are either *fresh* (an independent Gaussian field) or a noisy copy
of the most recent fresh channel, so neighbouring channels form redundant
groups.  Each channel then gets its own fixed scale, mimicking the uneven
channel energies of real activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["SyntheticSpec", "generate_synthetic", "cross_channel_correlation", "synthetic_images"]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic feature-tensor stream (channel axis 0)."""

    shape: tuple[int, ...] = (64, 8, 8)
    channel_redundancy: float = 0.9
    correlation_length: float = 0.0
    noise_scale: float = 0.1
    count: int = 256
    scale_spread: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.shape) < 1 or any(n < 1 for n in self.shape):
            raise ValueError(f"degenerate shape {self.shape}")
        if self.shape[0] < 2:
            raise ValueError("need at least two channels")
        if not 0.0 <= self.channel_redundancy <= 1.0:
            raise ValueError("channel_redundancy must lie in [0, 1]")
        if self.correlation_length < 0 or self.noise_scale < 0 or self.scale_spread < 0:
            raise ValueError("correlation_length, noise_scale and scale_spread must be >= 0")
        if self.count < 1:
            raise ValueError("count must be >= 1")


def _field(rng, spatial, corr):
    f = rng.standard_normal(spatial)
    if corr > 0 and spatial:
        f = gaussian_filter(f, corr, mode="wrap")
        f /= f.std() or 1.0
    return f


def generate_synthetic(spec: SyntheticSpec, seed=None) -> list[np.ndarray]:
    """Deterministic stream of ``spec.count`` float64 tensors of ``spec.shape``."""
    rng = np.random.default_rng(seed)
    C, spatial = spec.shape[0], spec.shape[1:]
    fresh = rng.random(C) >= spec.channel_redundancy
    fresh[0] = True
    source = np.maximum.accumulate(np.where(fresh, np.arange(C), 0))
    scales = np.exp(spec.scale_spread * rng.standard_normal(C))
    out = []
    for _ in range(spec.count):
        t = np.empty(spec.shape)
        for c in range(C):
            if fresh[c]:
                t[c] = _field(rng, spatial, spec.correlation_length)
            else:
                t[c] = t[source[c]]
                if spec.noise_scale:
                    t[c] = t[c] + spec.noise_scale * rng.standard_normal(spatial)
        # scale only after copying so copies track the unscaled source
        out.append(t * scales.reshape((C,) + (1,) * len(spatial)))
    return out


def cross_channel_correlation(tensors) -> np.ndarray:
    """Pearson correlation matrix between channels over positions and samples."""
    X = np.stack([np.asarray(t) for t in tensors])
    C = X.shape[1]
    return np.corrcoef(np.moveaxis(X, 1, 0).reshape(C, -1))


def synthetic_images(n: int, size: int = 16, channels: int = 1, seed=None, detail: int = 8,
                     texture: float = 0.0) -> np.ndarray:
    """``(n, channels, size, size)`` uint8 images: smooth gradients, blobs and boxes.

    ``detail`` sets the typical number of blobs and sharp-edged boxes per
    image.  ``texture`` adds a fine random pattern of that standard deviation
    (in units of full intensity) that no small code can describe exactly, so
    reconstruction keeps improving as the bottleneck widens.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    imgs = np.empty((n, channels, size, size))
    for i in range(n):
        for c in range(channels):
            base = rng.uniform(0.3, 0.7) + rng.uniform(-0.3, 0.3) * (xx - 0.5) \
                + rng.uniform(-0.3, 0.3) * (yy - 0.5)
            for _ in range(rng.integers(max(detail // 2, 1), detail + 2)):
                cy, cx = rng.uniform(0, 1, size=2)
                s = rng.uniform(0.04, 0.2)
                base += rng.uniform(-0.4, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            for _ in range(rng.integers(0, detail // 2 + 1)):
                y0, x0 = rng.integers(0, size - 1, size=2)
                h, w = rng.integers(1, size // 2 + 1, size=2)
                base[y0:y0 + h, x0:x0 + w] += rng.uniform(-0.3, 0.3)
            if texture:
                base += texture * _field(rng, (size, size), 1.0)
            imgs[i, c] = base
    return np.clip(np.rint(imgs * 255), 0, 255).astype(np.uint8)
