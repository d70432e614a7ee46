"""Composite differentiable functions built from tensor primitives."""

from __future__ import annotations

from .tensor import Tensor, l2_normalize, matmul, sum_


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    return sum_(l2_normalize(a, axis, eps) * l2_normalize(b, axis, eps), axis=axis)


def pairwise_cosine(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity matrix between rows: [..., M, D] x [..., N, D] -> [..., M, N]."""
    an = l2_normalize(a, -1, eps)
    bn = l2_normalize(b, -1, eps)
    return matmul(an, bn.transpose(*range(bn.ndim - 2), bn.ndim - 1, bn.ndim - 2))
