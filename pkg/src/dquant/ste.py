"""Straight-through depthwise quantization inside an autodiff graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, concat, stop_gradient, take_rows
from .quantizer import DepthwiseQuantizer, QuantizationResult, dq_forward

__all__ = ["STEOutput", "FrozenAssignment", "straight_through_quantize"]


@dataclass
class FrozenAssignment:
    """Assignments captured at a base point, for finite-difference checks.

    With assignments frozen the quantizer output becomes ``z + offset``
    with ``offset = z_hat - z_base`` held fixed, which is the function whose
    derivative the straight-through rule computes.
    """

    result: QuantizationResult
    offset: np.ndarray


@dataclass
class STEOutput:
    quantized: Node
    result: QuantizationResult
    codebook_term: Node
    commitment_term: Node
    vectors: list

    def freeze(self, z: Node) -> FrozenAssignment:
        return FrozenAssignment(self.result, self.result.quantized - z.value)


def _gather_codes(code_params, codes, q: DepthwiseQuantizer, shape) -> Node:
    """Differentiable reconstruction from code-vector parameters."""
    axis = q.axis % len(shape)
    n = shape[axis]
    parts = [take_rows(code_params[i], codes[..., i]) for i in range(q.M)]
    full = concat(parts, axis=-1)
    if full.shape[-1] != n:
        full = full[..., :n]
    order = list(range(full.ndim - 1))
    order.insert(axis, full.ndim - 1)
    return full.transpose(*order)


def straight_through_quantize(z: Node, q: DepthwiseQuantizer, beta: float = 0.25,
                              code_params=None, frozen: FrozenAssignment | None = None) -> STEOutput:
    """Quantize ``z`` with ``q``; gradients pass to ``z`` unchanged.

    Returns the quantized node (forward value = DQ reconstruction, Jacobian
    w.r.t. ``z`` = identity) plus the two loss terms

    * ``codebook_term  = |sg(z) - z_hat|^2 / n_vectors``
    * ``commitment_term = beta |z - sg(z_hat)|^2 / n_vectors``

    where ``n_vectors`` counts one vector per position per codebook.  When
    ``code_params`` (one ``(K, D)`` node per slice) is given, the codebook
    term is differentiable w.r.t. the codes; otherwise codes are expected to
    be refit by EMA and the term is only a metric.
    """
    zv = z.value
    if frozen is None:
        result = dq_forward(q, zv)
        zq_val = result.quantized
        offset = None
    else:
        result = frozen.result
        offset = frozen.offset
        zq_val = zv + offset
    if zq_val.shape != zv.shape:
        raise ValueError(f"quantizer output {zq_val.shape} does not match input {zv.shape}")
    z_q = Node(zq_val, (z,), lambda g: (g,))

    n_vectors = result.codes.size
    z_hat = stop_gradient(Node(result.quantized))
    diff = z - z_hat
    commitment = (diff * diff).sum() * (beta / n_vectors)
    if code_params is not None:
        z_hat_p = _gather_codes(code_params, result.codes, q, zv.shape)
        d2 = stop_gradient(z) - z_hat_p
    else:
        d2 = stop_gradient(z) - z_hat
    codebook = (d2 * d2).sum() * (1.0 / n_vectors)

    vectors = None
    if frozen is None:
        vectors, _ = q.slice_vectors(zv)
    return STEOutput(z_q, result, codebook, commitment, vectors)

