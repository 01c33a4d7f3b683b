"""Codebooks and the VQ / depthwise quantization operators.

A :class:`Codebook` holds ``K`` code vectors of dimension ``D`` plus the
exponential-moving-average statistics used to refit them.  A
:class:`DepthwiseQuantizer` binds ``M`` codebooks to the ``M`` slices of a
tensor decomposed along one axis; every spatial position of slice ``i`` is
quantized by book ``i`` and the quantized slices are concatenated back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import AxisDecomposition, decompose, positions_as_vectors, reassemble, vectors_to_positions

__all__ = [
    "Codebook",
    "DepthwiseQuantizer",
    "QuantizationResult",
    "CapacityReport",
    "nearest_code",
    "vq_forward",
    "dq_forward",
    "quantization_loss",
    "ema_update",
    "reinit_dead_codes",
    "capacity",
]

GAMMA = 0.99
EPSILON = 1e-5

# rows of the (P, K, D) difference block evaluated at once
_CHUNK = 1 << 18


class Codebook:
    """``K`` code vectors of dimension ``D`` with EMA accumulators.

    ``counts`` (n_i) and ``sums`` (m_i) are the raw exponential moving
    averages of assignment counts and assigned-vector sums.  A code whose
    count is exactly zero has never been assigned and keeps its initial value.
    """

    def __init__(self, codes, gamma: float = GAMMA, epsilon: float = EPSILON,
                 counts=None, sums=None):
        codes = np.array(codes, dtype=np.result_type(np.asarray(codes).dtype, np.float32))
        if codes.ndim != 2:
            raise ValueError("codes must be a (K, D) matrix")
        if not np.all(np.isfinite(codes)):
            raise ValueError("codes must be finite")
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        self.codes = codes
        self.gamma = float(gamma)
        self.epsilon = float(epsilon)
        K, D = codes.shape
        self.counts = np.zeros(K, dtype=np.float64) if counts is None else np.array(counts, dtype=np.float64)
        self.sums = np.zeros((K, D), dtype=np.float64) if sums is None else np.array(sums, dtype=np.float64)
        if self.counts.shape != (K,) or self.sums.shape != (K, D):
            raise ValueError("EMA state does not match the codebook shape")
        if np.any(self.counts < 0):
            raise ValueError("EMA counts must be non-negative")

    @classmethod
    def from_samples(cls, vectors, K: int, rng=None, **kwargs) -> "Codebook":
        """Seed ``K`` codes with distinct rows drawn from ``vectors``.

        Duplicate rows are only used once the distinct ones run out, and rows
        are drawn with replacement when there are fewer than ``K`` in total.
        """
        vectors = np.asarray(vectors)
        rng = np.random.default_rng(rng)
        _, first = np.unique(vectors, axis=0, return_index=True)
        first = np.sort(first)
        if first.size >= K:
            idx = first[rng.choice(first.size, size=K, replace=False)]
        else:
            rest = np.setdiff1d(np.arange(vectors.shape[0]), first)
            extra = K - first.size
            idx = np.concatenate([first, rng.choice(rest, size=extra, replace=rest.size < extra)
                                  if rest.size else rng.choice(first, size=extra)])
        return cls(vectors[idx].copy(), **kwargs)

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def D(self) -> int:
        return self.codes.shape[1]

    def smoothed_counts(self) -> np.ndarray:
        """Laplace-smoothed counts ``(n_i + eps) / (sum n + K eps) * sum n``."""
        total = self.counts.sum()
        return (self.counts + self.epsilon) / (total + self.K * self.epsilon) * total

    def ema_update(self, indices, vectors) -> "Codebook":
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, self.D)
        if indices.shape[0] != vectors.shape[0]:
            raise ValueError("indices and vectors differ in length")
        if indices.size and (indices.min() < 0 or indices.max() >= self.K):
            raise ValueError("code index out of range")
        batch_counts = np.bincount(indices, minlength=self.K).astype(np.float64)
        batch_sums = np.zeros_like(self.sums)
        np.add.at(batch_sums, indices, vectors)
        g = self.gamma
        self.counts = g * self.counts + (1.0 - g) * batch_counts
        self.sums = g * self.sums + (1.0 - g) * batch_sums
        live = self.counts > 0
        if np.any(live):
            n_hat = self.smoothed_counts()
            self.codes[live] = (self.sums[live] / n_hat[live, None]).astype(self.codes.dtype)
        return self

    def reinit_dead(self, batch_vectors, threshold: float, rng=None) -> int:
        batch_vectors = np.asarray(batch_vectors)
        if batch_vectors.shape[0] == 0:
            raise ValueError("re-initialization needs a non-empty batch")
        dead = np.flatnonzero(self.counts < threshold)
        if dead.size == 0:
            return 0
        rng = np.random.default_rng(rng)
        replace = batch_vectors.shape[0] < dead.size
        rows = batch_vectors[rng.choice(batch_vectors.shape[0], size=dead.size, replace=replace)]
        self.codes[dead] = rows
        self.counts[dead] = 1.0
        self.sums[dead] = rows
        return int(dead.size)

    def copy(self) -> "Codebook":
        return Codebook(self.codes.copy(), self.gamma, self.epsilon, self.counts.copy(), self.sums.copy())


@dataclass
class QuantizationResult:
    """Output of a quantizer.

    ``codes`` and ``distances`` have one entry per position per codebook:
    shape ``(P,)`` for plain VQ and ``other_shape + (M,)`` for DQ.
    ``quantized`` has the shape of the input.
    """

    codes: np.ndarray
    quantized: np.ndarray
    distances: np.ndarray

    def mean_distance(self) -> float:
        return float(np.mean(self.distances, dtype=np.float64)) if self.distances.size else 0.0


def _sq_dists(vectors: np.ndarray, codes: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2 + |b|^2 - 2ab expansion so
    # that ties and exact matches are resolved exactly
    out = np.empty((vectors.shape[0], codes.shape[0]), dtype=np.result_type(vectors, codes))
    step = max(1, _CHUNK // max(1, codes.shape[0] * codes.shape[1]))
    for lo in range(0, vectors.shape[0], step):
        diff = vectors[lo:lo + step, None, :] - codes[None, :, :]
        np.einsum("pkd,pkd->pk", diff, diff, out=out[lo:lo + step])
    return out


def nearest_code(book: Codebook, v) -> tuple[int, float]:
    """Index and squared L2 distance of the code closest to ``v``.

    Ties go to the lowest index.
    """
    v = np.asarray(v, dtype=np.result_type(book.codes.dtype, np.float64))
    if v.shape != (book.D,):
        raise ValueError(f"expected a vector of length {book.D}, got shape {v.shape}")
    d = ((book.codes - v) ** 2).sum(axis=1)
    j = int(np.argmin(d))
    return j, float(d[j])


def vq_forward(book: Codebook, vectors) -> QuantizationResult:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[1] != book.D:
        raise ValueError(f"expected a (P, {book.D}) matrix, got shape {vectors.shape}")
    if vectors.shape[0] == 0:
        return QuantizationResult(np.zeros(0, dtype=np.int64), vectors.copy(),
                                  np.zeros(0, dtype=np.float64))
    codes = book.codes.astype(vectors.dtype, copy=False) if vectors.dtype.kind == "f" else book.codes
    dist = _sq_dists(vectors, codes)
    idx = np.argmin(dist, axis=1)
    return QuantizationResult(idx.astype(np.int64), book.codes[idx].astype(vectors.dtype, copy=False),
                              dist[np.arange(idx.size), idx])


class DepthwiseQuantizer:
    """``M`` codebooks applied to the ``M`` slices of a tensor along ``axis``.

    Passing the same :class:`Codebook` object several times in ``books``
    gives a tied (plain VQ) baseline over the same decomposition; EMA
    statistics are then pooled over all slices using it.
    """

    def __init__(self, books, axis: int = 0):
        books = list(books)
        if not books:
            raise ValueError("need at least one codebook")
        if len({b.D for b in books}) != 1:
            raise ValueError("all codebooks must share D")
        self.books = books
        self.axis = axis

    @classmethod
    def create(cls, M: int, K: int, D: int, axis: int = 0, *, shared: bool = False,
               rng=None, dtype=np.float64, gamma: float = GAMMA, epsilon: float = EPSILON):
        rng = np.random.default_rng(rng)
        if shared:
            book = Codebook(rng.standard_normal((K, D)).astype(dtype), gamma, epsilon)
            return cls([book] * M, axis)
        return cls([Codebook(rng.standard_normal((K, D)).astype(dtype), gamma, epsilon)
                    for _ in range(M)], axis)

    @property
    def M(self) -> int:
        return len(self.books)

    @property
    def K(self) -> int:
        return self.books[0].K

    @property
    def D(self) -> int:
        return self.books[0].D

    @property
    def shared(self) -> bool:
        return len({id(b) for b in self.books}) < self.M

    def unique_books(self) -> list[tuple[Codebook, list[int]]]:
        """Distinct codebooks with the slice indices that use each one."""
        seen: dict[int, tuple[Codebook, list[int]]] = {}
        for i, b in enumerate(self.books):
            seen.setdefault(id(b), (b, []))[1].append(i)
        return list(seen.values())

    def slice_vectors(self, t) -> tuple[list[np.ndarray], AxisDecomposition]:
        t = np.asarray(t)
        slices, d = decompose(t, self.axis, self.M)
        if d.slice_extent != self.D:
            raise ValueError(f"axis extent {t.shape[d.axis]} does not split into {self.M} slices of D={self.D}")
        return [positions_as_vectors(s, d.axis) for s in slices], d

    def ema_update(self, codes, vectors_per_slice) -> None:
        """EMA refit of every book from the assignments of one forward pass.

        ``codes`` is the ``(..., M)`` array from :func:`dq_forward` and
        ``vectors_per_slice`` the matching list of ``(P, D)`` matrices.
        """
        codes = np.asarray(codes).reshape(-1, self.M)
        for book, slots in self.unique_books():
            idx = np.concatenate([codes[:, i] for i in slots])
            vec = np.concatenate([vectors_per_slice[i] for i in slots])
            book.ema_update(idx, vec)

    def reinit_dead_codes(self, vectors_per_slice, threshold=None, rng=None) -> int:
        rng = np.random.default_rng(rng)
        total = 0
        for book, slots in self.unique_books():
            vec = np.concatenate([vectors_per_slice[i] for i in slots])
            thr = default_dead_threshold(book) if threshold is None else threshold
            total += book.reinit_dead(vec, thr, rng)
        return total


def default_dead_threshold(book: Codebook, fraction: float = 0.01) -> float:
    """``fraction`` of the mass each code would hold under uniform usage."""
    return fraction * book.counts.sum() / book.K


def dq_forward(q: DepthwiseQuantizer, t) -> QuantizationResult:
    t = np.asarray(t)
    vecs, d = q.slice_vectors(t)
    slice_shape = d.slice_shape()
    other = tuple(n for i, n in enumerate(t.shape) if i != d.axis)
    results = [vq_forward(book, v) for book, v in zip(q.books, vecs)]
    quant = reassemble([vectors_to_positions(r.quantized, slice_shape, d.axis) for r in results], d)
    codes = np.stack([r.codes for r in results], axis=-1).reshape(other + (q.M,))
    dists = np.stack([r.distances for r in results], axis=-1).reshape(other + (q.M,))
    return QuantizationResult(codes, quant, dists)


def quantization_loss(z, z_hat, beta: float, axis: int = -1, mask=None) -> tuple[float, float]:
    """Codebook and commitment terms as mean squared distance per vector.

    Vectors run along ``axis``; ``mask`` (broadcastable to ``z``) excludes
    padding elements from the sums.  Without stop-gradients both terms have
    the same value up to the ``beta`` factor.
    """
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_hat.shape}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    sq = (z - z_hat) ** 2
    if mask is not None:
        sq = np.where(np.broadcast_to(mask, z.shape), sq, 0.0)
    n_vectors = z.size // z.shape[axis]
    # exactly rounded, so the value does not depend on memory layout
    term = math.fsum(sq.ravel().tolist()) / n_vectors
    return term, beta * term


def ema_update(book: Codebook, indices, vectors) -> Codebook:
    """Soft-EM step: decay counts/sums by ``gamma`` and refit assigned codes.

    ``n <- g n + (1-g) count``, ``m <- g m + (1-g) sum``, then
    ``code = m / n_hat`` with Laplace-smoothed counts ``n_hat``.
    """
    return book.ema_update(indices, vectors)


def reinit_dead_codes(book: Codebook, batch_vectors, threshold: float, rng_seed=None) -> int:
    """Reset every code with EMA count below ``threshold`` to a random batch row."""
    return book.reinit_dead(batch_vectors, threshold, rng_seed)


@dataclass(frozen=True)
class CapacityReport:
    K: int
    M: int
    cost: int
    capacity_nats: float
    sample_space_log: float

    @property
    def kl_constant(self) -> float:
        """KL to the uniform code prior dropped from the training objective."""
        return self.capacity_nats

    @property
    def capacity_bits(self) -> float:
        return self.capacity_nats / math.log(2)


def capacity(K: int, M: int) -> CapacityReport:
    """Cost ``K*M`` code vectors and representation capacity ``M ln K`` nats."""
    if K < 1 or M < 1:
        raise ValueError("K and M must be >= 1")
    c = M * math.log(K)
    return CapacityReport(K=K, M=M, cost=K * M, capacity_nats=c, sample_space_log=c)
