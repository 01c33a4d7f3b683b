"""Plug-in entropy and mutual information over discrete code streams.

Everything is in nats.  The estimators are the plain maximum-likelihood
(frequency count) ones with no bias correction; the bias of plug-in MI is
roughly ``(Kx - 1)(Ky - 1) / (2N)``, so keep ``N`` well above ``K**2``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .quantizer import Codebook, DepthwiseQuantizer, default_dead_threshold, dq_forward

__all__ = [
    "UsageHistogram",
    "JointHistogram",
    "InfoReport",
    "entropy",
    "mutual_information",
    "pairwise_mi_matrix",
    "position_entropy_map",
    "posthoc_density_estimate",
    "nats_to_bits",
]


def nats_to_bits(x):
    return np.asarray(x) / math.log(2) if np.ndim(x) else x / math.log(2)


@dataclass
class UsageHistogram:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or np.any(self.counts < 0):
            raise ValueError("counts must be a 1-D array of non-negative integers")

    @classmethod
    def from_codes(cls, codes, K: int) -> "UsageHistogram":
        return cls(np.bincount(np.asarray(codes, dtype=np.int64).ravel(), minlength=K))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "UsageHistogram") -> "UsageHistogram":
        return UsageHistogram(self.counts + other.counts)


@dataclass
class JointHistogram:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or np.any(self.counts < 0):
            raise ValueError("counts must be a 2-D array of non-negative integers")

    @classmethod
    def from_streams(cls, x, y, Kx: int, Ky: int | None = None) -> "JointHistogram":
        x = np.asarray(x, dtype=np.int64).ravel()
        y = np.asarray(y, dtype=np.int64).ravel()
        if x.shape != y.shape:
            raise ValueError(f"stream lengths differ: {x.size} vs {y.size}")
        Ky = Kx if Ky is None else Ky
        flat = np.bincount(x * Ky + y, minlength=Kx * Ky)
        return cls(flat.reshape(Kx, Ky))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def marginals(self) -> tuple[UsageHistogram, UsageHistogram]:
        return UsageHistogram(self.counts.sum(axis=1)), UsageHistogram(self.counts.sum(axis=0))

    def merge(self, other: "JointHistogram") -> "JointHistogram":
        return JointHistogram(self.counts + other.counts)

    @property
    def T(self) -> "JointHistogram":
        return JointHistogram(self.counts.T)


def entropy(h) -> float:
    """``-sum p ln p`` of a histogram (``UsageHistogram`` or raw counts)."""
    counts = h.counts if isinstance(h, UsageHistogram) else np.asarray(h, dtype=np.int64)
    total = int(counts.sum())
    if total <= 0:
        raise ValueError("entropy of an empty histogram")
    nz = counts[counts > 0].astype(np.float64)
    # sum p ln(N / n), same per-term form as mutual_information so the
    # diagonal-joint identity I(X;X) == H(X) holds bit-exactly
    return math.fsum((nz / total) * np.log(total / nz))


def mutual_information(j) -> float:
    """Plug-in ``sum p(x,y) ln(p(x,y) / (p(x) p(y)))``.

    The ratio is formed from integer counts, ``n_xy N / (n_x n_y)``, so a
    joint that factors exactly gives ``ln 1 = 0`` exactly.  Terms are
    summed with ``math.fsum`` so the result does not depend on their order
    (``I(X;Y) == I(Y;X)`` bit for bit).
    """
    counts = j.counts if isinstance(j, JointHistogram) else np.asarray(j, dtype=np.int64)
    total = int(counts.sum())
    if total <= 0:
        raise ValueError("mutual information of an empty histogram")
    nx = counts.sum(axis=1)
    ny = counts.sum(axis=0)
    r, c = np.nonzero(counts)
    nxy = counts[r, c]
    # equal integers round to the same double, so factorized cells give 1.0
    ratio = (nxy * total) / (nx[r] * ny[c])
    mi = math.fsum((nxy / total) * np.log(ratio))
    return max(mi, 0.0)


def pairwise_mi_matrix(code_streams, K: int) -> np.ndarray:
    """Upper-triangular ``(M, M)`` MI matrix; diagonal holds entropies.

    Entries below the diagonal are NaN (not computed).
    """
    streams = [np.asarray(s, dtype=np.int64).ravel() for s in code_streams]
    if not streams:
        raise ValueError("need at least one stream")
    n = streams[0].size
    if n == 0:
        raise ValueError("streams are empty")
    for i, s in enumerate(streams):
        if s.size != n:
            raise ValueError(f"stream {i} has length {s.size}, expected {n}")
    M = len(streams)
    out = np.full((M, M), np.nan)
    for i in range(M):
        out[i, i] = entropy(np.bincount(streams[i], minlength=K))
        for jx in range(i + 1, M):
            out[i, jx] = mutual_information(JointHistogram.from_streams(streams[i], streams[jx], K))
    return out


def position_entropy_map(code_grids, K: int) -> np.ndarray:
    """Mean over codebooks of the per-position code entropy across a stream.

    ``code_grids`` is ``(T, *spatial, M)`` (or an iterable of
    ``(*spatial, M)`` grids); returns a ``spatial``-shaped map.
    """
    grids = np.asarray(code_grids if isinstance(code_grids, np.ndarray) else list(code_grids))
    if grids.ndim < 2 or grids.shape[0] == 0:
        raise ValueError("empty code stream")
    T = grids.shape[0]
    spatial = grids.shape[1:-1]
    flat = grids.reshape(T, -1).astype(np.int64)
    # one histogram per (position, book) column
    cols = flat.shape[1]
    counts = np.zeros((cols, K), dtype=np.int64)
    np.add.at(counts, (np.broadcast_to(np.arange(cols), flat.shape), flat), 1)
    p = counts / T
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(counts > 0, p * np.log(p), 0.0).sum(axis=1)
    return h.reshape(spatial + (grids.shape[-1],)).mean(axis=-1)


def mean_off_diagonal(mi: np.ndarray) -> float:
    iu = np.triu_indices(mi.shape[0], k=1)
    return float(np.mean(mi[iu])) if iu[0].size else 0.0


@dataclass
class InfoReport:
    per_book_entropy: np.ndarray
    mi_matrix: np.ndarray
    position_entropy_map: np.ndarray
    split: str = "train"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_codes(cls, codes, K: int, split: str = "train") -> "InfoReport":
        """Build a report from a ``(T, *spatial, M)`` code array."""
        codes = np.asarray(codes)
        streams = codes.reshape(-1, codes.shape[-1]).T
        mi = pairwise_mi_matrix(streams, K)
        return cls(np.diag(mi).copy(), mi, position_entropy_map(codes, K), split=split)

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.position_entropy_map))

    @property
    def mean_mi(self) -> float:
        return mean_off_diagonal(self.mi_matrix)

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in np.atleast_2d(a)]
        return {
            "schema": 1,
            "split": self.split,
            "per_book_entropy": [float(v) for v in self.per_book_entropy],
            "mean_entropy": self.mean_entropy,
            "mean_offdiag_mi": self.mean_mi,
            "mi_matrix": clean(self.mi_matrix),
            "position_entropy_map": np.asarray(self.position_entropy_map, dtype=float).tolist(),
            **self.extra,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_csv(self, path) -> None:
        M = self.mi_matrix.shape[0]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["book_i", "book_j", "mi_nats"])
            for i in range(M):
                for jx in range(i, M):
                    w.writerow([i, jx, repr(float(self.mi_matrix[i, jx]))])


def posthoc_density_estimate(tensors, axis: int, M: int, K: int, epochs: int = 1, *,
                             batch_size: int = 16, rng=None, gamma: float = 0.99,
                             epsilon: float = 1e-5, dead_every: int = 100,
                             dead_fraction: float = 0.01) -> tuple[float, float]:
    """Fit a depthwise quantizer to a tensor stream by EMA alone.

    Each tensor is decomposed along ``axis`` into ``M`` slices.  Codebooks are
    seeded from the first batch, refit with EMA updates, and dead codes are
    re-seeded every ``dead_every`` steps.  Returns the mean squared L2 error
    per unpadded element and the mean plug-in code entropy (nats, averaged
    over books), both measured with the final codebooks over the full stream.
    """
    data = [np.asarray(t, dtype=np.float64) for t in tensors]
    if not data:
        raise ValueError("tensor stream is empty")
    shape = data[0].shape
    for t in data:
        if t.shape != shape:
            raise ValueError(f"incompatible shapes {shape} and {t.shape}")
    rng = np.random.default_rng(rng)
    X = np.stack(data)
    ax = (axis % len(shape)) + 1  # batch axis prepended
    D = -(-X.shape[ax] // M)
    first = X[rng.permutation(len(X))[:batch_size]]
    probe = DepthwiseQuantizer([Codebook(np.zeros((1, D)))] * M, ax)
    vecs, _ = probe.slice_vectors(first)
    q = DepthwiseQuantizer([Codebook.from_samples(v, K, rng, gamma=gamma, epsilon=epsilon) for v in vecs], ax)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(X), batch_size):
            batch = X[order[lo:lo + batch_size]]
            vecs, _ = q.slice_vectors(batch)
            res = dq_forward(q, batch)
            q.ema_update(res.codes, vecs)
            step += 1
            if dead_every and step % dead_every == 0:
                for book, v in zip(q.books, vecs):
                    book.reinit_dead(v, default_dead_threshold(book, dead_fraction), rng)
    res = dq_forward(q, X)
    l2 = float(np.mean((res.quantized - X) ** 2))
    codes = res.codes.reshape(-1, M)
    h = float(np.mean([entropy(np.bincount(codes[:, i], minlength=K)) for i in range(M)]))
    return l2, h
