"""Top-k attention arrows from a non-local block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..nonlocal_block import NonLocalBlock
from ..tensor import Tensor, no_grad


@dataclass
class AttentionRecord:
    block: str
    query: tuple[int, int, int]
    keys: list[tuple[int, int, int]]
    weights: list[float]
    probabilities: bool  # False: normalised scores of a non-softmax kind

    def rows(self):
        for k, w in zip(self.keys, self.weights):
            yield self.query + k + (w,)


def top_k(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, descending, ties by lower index."""
    return np.argsort(-row, kind="stable")[:k]


def block_affinity(net, clip, block: str) -> tuple[np.ndarray, tuple, tuple, object]:
    """Run ``clip[T,H,W,C]`` through ``net`` and return the block's ``[N, M]`` weights."""
    try:
        mod = net.block(block)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    if not isinstance(mod, NonLocalBlock):
        raise ConfigError(f"{block!r} is not a non-local block")
    x = clip.data if isinstance(clip, Tensor) else np.asarray(clip, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    net.eval()
    mod.record_attention = True
    try:
        with no_grad():
            net(Tensor(x))
        rec = mod.last_record
    finally:
        mod.record_attention = False
        mod.last_record = None
    return rec["affinity"][0], rec["query_grid"], rec["key_grid"], rec["kind"]


def extract_attention(net, clip, block: str, queries=None, k: int = 20) -> list[AttentionRecord]:
    """Top-``k`` (key position, weight) pairs for each query ``(t, h, w)``.

    ``queries=None`` takes every position of the block's grid.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    aff, qgrid, kgrid, kind = block_affinity(net, clip, block)
    T, H, W = qgrid
    if queries is None:
        queries = [(t, h, w) for t in range(T) for h in range(H) for w in range(W)]
    out = []
    for q in queries:
        q = tuple(int(v) for v in q)
        if len(q) != 3 or not all(0 <= v < n for v, n in zip(q, qgrid)):
            raise ConfigError(f"query {q} outside the block grid {qgrid}")
        row = aff[(q[0] * H + q[1]) * W + q[2]]
        idx = top_k(row, k)
        keys = [tuple(int(v) for v in np.unravel_index(j, kgrid)) for j in idx]
        out.append(AttentionRecord(block, q, keys, [float(row[j]) for j in idx], kind.uses_softmax))
    return out
