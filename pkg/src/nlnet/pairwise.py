"""Pairwise affinity functions and their normalisation.

Four instantiations are supported:

* ``GAUSSIAN`` -- ``exp(x_i . x_j)`` on the raw signal, normalised by the row sum.
* ``EMBEDDED_GAUSSIAN`` -- ``exp(theta_i . phi_j)``, normalised by the row sum.
* ``DOT_PRODUCT`` -- ``theta_i . phi_j``, normalised by the number of keys.
* ``CONCATENATION`` -- ``relu(w_f . [theta_i, phi_j])``, normalised by the number of keys.

The two Gaussian kinds are stored as raw dot products and exponentiated inside
a row softmax, which is the same quantity as exp-then-divide-by-row-sum but
safe for large scores.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as F
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class PairwiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    EMBEDDED_GAUSSIAN = "embedded_gaussian"
    DOT_PRODUCT = "dot_product"
    CONCATENATION = "concatenation"

    @property
    def uses_softmax(self) -> bool:
        return self in (PairwiseKind.GAUSSIAN, PairwiseKind.EMBEDDED_GAUSSIAN)

    @property
    def has_embeddings(self) -> bool:
        return self is not PairwiseKind.GAUSSIAN

    @classmethod
    def parse(cls, value) -> "PairwiseKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown pairwise kind {value!r}; expected one of {choices}") from None


@dataclass
class AffinityMatrix:
    values: Tensor  # [..., N, M]
    kind: PairwiseKind
    normalized: bool = False


def pairwise_scores(kind, q: Tensor, k: Tensor, w_f: Tensor | None = None) -> AffinityMatrix:
    """Unnormalised scores between queries ``q[..., N, d]`` and keys ``k[..., M, d]``.

    For the Gaussian kinds the scores are the dot products that will be
    exponentiated by :func:`normalize`. For concatenation, ``w_f`` (length
    ``2d``) is split into query and key halves so that
    ``relu(w_f . [q_i, k_j]) = relu(w1 . q_i + w2 . k_j)`` is formed as an
    outer sum without materialising the concatenated pairs.
    """
    kind = PairwiseKind.parse(kind)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"query/key batch dims differ: {q.shape} vs {k.shape}")
    d = q.shape[-1]
    if kind is PairwiseKind.CONCATENATION:
        if w_f is None:
            raise ConfigError("concatenation pairwise function needs w_f")
        if w_f.shape != (2 * d,):
            raise ShapeError(f"w_f must have shape ({2 * d},), got {w_f.shape}")
        w1 = F.reshape(F.slice_axis(w_f, 0, 0, d), (d, 1))
        w2 = F.reshape(F.slice_axis(w_f, 0, d, 2 * d), (d, 1))
        a = F.reshape(F.matmul(q, w1), q.shape[:-1])
        b = F.reshape(F.matmul(k, w2), k.shape[:-1])
        scores = F.relu(F.outer_sum(a, b))
    else:
        if w_f is not None:
            raise ConfigError(f"w_f is only used by the concatenation kind, not {kind.value}")
        kt = F.permute(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        scores = F.matmul(q, kt)
    return AffinityMatrix(scores, kind, normalized=False)


def normalize(a: AffinityMatrix, mask: np.ndarray | None = None) -> AffinityMatrix:
    """Apply ``1/C(x)``: row softmax for Gaussian kinds, ``1/M`` otherwise.

    ``mask[N, M]`` (boolean) restricts the summation index per row. Masked
    entries become exact zeros; for the ``1/M`` kinds ``M`` becomes the number
    of admissible keys in that row.
    """
    if a.normalized:
        raise ValueError("affinity is already normalized")
    s = a.values
    if a.kind.uses_softmax:
        p = F.softmax_rows(s, mask)
    else:
        M = s.shape[-1]
        if mask is None:
            p = F.mul(s, 1.0 / M)
        else:
            mask = np.asarray(mask, dtype=bool)
            counts = mask.sum(axis=-1, keepdims=True)
            if np.any(counts == 0):
                raise ShapeError("mask leaves a query with no admissible keys")
            p = F.mul(s, mask / counts)
    return AffinityMatrix(p, a.kind, normalized=True)

