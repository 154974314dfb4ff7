"""Slow, literal reference implementations used as test and verify oracles.

Nothing here calls into the vectorised paths of :mod:`nlnet.tensor`,
:mod:`nlnet.pairwise` or :mod:`nlnet.nonlocal_block`; each routine is written
as explicit loops over positions so that it can check them independently.
"""

from __future__ import annotations

import math

import numpy as np

from .nonlocal_block import MaskMode, NonLocalConfig
from .pairwise import PairwiseKind


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    M, K = a.shape
    K2, N = b.shape
    assert K == K2
    c = np.zeros((M, N))
    for m in range(M):
        for n in range(N):
            acc = 0.0
            for k in range(K):
                acc += a[m, k] * b[k, n]
            c[m, n] = acc
    return c


def softmax_naive(row) -> list[float]:
    """exp / sum(exp) in extended precision via ``math.fsum``."""
    e = [math.exp(v) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def conv2d_loops(frame: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct 2-D cross-correlation of ``frame[H,W,Cin]`` with ``w[kh,kw,Cin,Cout]``."""
    H, W, ci = frame.shape
    kh, kw, _, co = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Ho, Wo, co))
    for i in range(Ho):
        for j in range(Wo):
            for o in range(co):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        y, x = i * stride + a - pad, j * stride + b - pad
                        if 0 <= y < H and 0 <= x < W:
                            for c in range(ci):
                                acc += frame[y, x, c] * w[a, b, c, o]
                out[i, j, o] = acc
    return out


def conv3d_loops(x: np.ndarray, w: np.ndarray, stride=(1, 1, 1), pad=(0, 0, 0),
                 replicate_time: bool = False) -> np.ndarray:
    B, T, H, W, ci = x.shape
    kt, kh, kw, _, co = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((B, To, Ho, Wo, co))
    for n in range(B):
        for t in range(To):
            for i in range(Ho):
                for j in range(Wo):
                    for o in range(co):
                        acc = 0.0
                        for a in range(kt):
                            tt = t * st + a - pt
                            if replicate_time:
                                tt = min(max(tt, 0), T - 1)
                            elif not 0 <= tt < T:
                                continue
                            for b in range(kh):
                                for c in range(kw):
                                    y, z = i * sh + b - ph, j * sw + c - pw
                                    if 0 <= y < H and 0 <= z < W:
                                        acc += float(np.dot(x[n, tt, y, z], w[a, b, c, :, o]))
                        out[n, t, i, j, o] = acc
    return out


def max_pool_loops(x: np.ndarray, window, stride, pad=(0, 0, 0)) -> np.ndarray:
    B, T, H, W, C = x.shape
    kt, kh, kw = window
    st, sh, sw = stride
    pt, ph, pw = pad
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.empty((B, To, Ho, Wo, C))
    for n in range(B):
        for t in range(To):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        best = -math.inf
                        for a in range(kt):
                            for b in range(kh):
                                for d in range(kw):
                                    tt, y, z = t * st + a - pt, i * sh + b - ph, j * sw + d - pw
                                    if 0 <= tt < T and 0 <= y < H and 0 <= z < W:
                                        best = max(best, x[n, tt, y, z, c])
                        out[n, t, i, j, c] = best
    return out


def concat_scores_loops(q: np.ndarray, k: np.ndarray, w_f: np.ndarray) -> np.ndarray:
    """relu(w_f . [q_i, k_j]) with an explicit concatenated vector per pair."""
    out = np.zeros((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            pair = np.concatenate([q[i], k[j]])
            out[i, j] = max(0.0, float(np.dot(w_f, pair)))
    return out


def _pairwise(kind: PairwiseKind, qi, kj, w_f) -> float:
    if kind is PairwiseKind.GAUSSIAN or kind is PairwiseKind.EMBEDDED_GAUSSIAN:
        return math.exp(float(np.dot(qi, kj)))
    if kind is PairwiseKind.DOT_PRODUCT:
        return float(np.dot(qi, kj))
    return max(0.0, float(np.dot(w_f, np.concatenate([qi, kj]))))


def _admissible(mode: MaskMode, qpos, kpos, s: int) -> bool:
    if mode is MaskMode.SPACE_ONLY:
        return qpos[0] == kpos[0]
    if mode is MaskMode.TIME_ONLY:
        # the key cell pooled from the query's own s x s window
        return (qpos[1] // s, qpos[2] // s) == tuple(kpos[1:])
    return True


def nonlocal_loops(x: np.ndarray, params: dict, cfg: NonLocalConfig, with_affinity: bool = False):
    """Per-position evaluation of the generic non-local operation.

    ``x[B,T,H,W,C]``; ``params`` holds numpy arrays under the names of
    :class:`~nlnet.nonlocal_block.NonLocalParams`. Returns ``y[B,T,H,W,b]``
    (and the ``[B,N,M]`` weights if requested). Exponentials are taken
    directly, so inputs must be modest in scale.
    """
    B, T, H, W, C = x.shape
    s = cfg.subsample_spatial
    Wg, Wt, Wp, wf = params["W_g"], params.get("W_theta"), params.get("W_phi"), params.get("w_f")
    b = Wg.shape[1]
    Hk, Wk = H // s, W // s
    qpos = [(t, h, w) for t in range(T) for h in range(H) for w in range(W)]
    kpos = [(t, h, w) for t in range(T) for h in range(Hk) for w in range(Wk)]
    y = np.zeros((B, T, H, W, b))
    aff = np.zeros((B, len(qpos), len(kpos)))
    for n in range(B):
        theta = {p: (x[n][p] if Wt is None else x[n][p] @ Wt) for p in qpos}
        phi_full = {p: (x[n][p] if Wp is None else x[n][p] @ Wp) for p in qpos}
        g_full = {p: x[n][p] @ Wg for p in qpos}
        phi, g = {}, {}
        for kp in kpos:
            t, h, w = kp
            cells = [(t, h * s + a, w * s + c) for a in range(s) for c in range(s)]
            phi[kp] = np.max([phi_full[c] for c in cells], axis=0)
            g[kp] = np.max([g_full[c] for c in cells], axis=0)
        for i, qp in enumerate(qpos):
            weights = []
            for j, kp in enumerate(kpos):
                if _admissible(cfg.mask, qp, kp, s):
                    weights.append((j, _pairwise(cfg.kind, theta[qp], phi[kp], wf)))
            if cfg.kind.uses_softmax:
                norm = math.fsum(f for _, f in weights)
            else:
                norm = float(len(weights))
            acc = np.zeros(b)
            for j, f in weights:
                aff[n, i, j] = f / norm
                acc = acc + (f / norm) * g[kpos[j]]
            y[n][qp] = acc
    return (y, aff) if with_affinity else y


def block_loops(x: np.ndarray, params: dict, cfg: NonLocalConfig, bn_training: bool,
                eps: float = 1e-5) -> np.ndarray:
    """Residual block by loops: ``z_i = BN(W_z y_i) + x_i``.

    ``bn_training`` uses per-channel batch statistics over all ``B*N`` rows;
    otherwise ``params['bn_running_mean'/'bn_running_var']``.
    """
    y = nonlocal_loops(x, params, cfg)
    B, T, H, W, C = x.shape
    Wz = params["W_z"]
    rows = [(n, t, h, w) for n in range(B) for t in range(T) for h in range(H) for w in range(W)]
    u = {r: y[r] @ Wz for r in rows}
    z = np.zeros_like(x)
    gamma = params.get("bn_gamma")
    for c in range(C):
        vals = [u[r][c] for r in rows]
        if gamma is None:
            out = vals
        else:
            if bn_training:
                mu = math.fsum(vals) / len(vals)
                var = math.fsum((v - mu) ** 2 for v in vals) / len(vals)
            else:
                mu, var = params["bn_running_mean"][c], params["bn_running_var"][c]
            out = [(v - mu) / math.sqrt(var + eps) * gamma[c] + params["bn_beta"][c] for v in vals]
        for r, v in zip(rows, out):
            z[r + (c,)] = v + x[r + (c,)]
    return z


def self_attention(x: np.ndarray, W_theta: np.ndarray, W_phi: np.ndarray, W_g: np.ndarray) -> np.ndarray:
    """softmax(Q K^T) V per batch item on flattened positions: ``x[B,N,C] -> [B,N,b]``."""
    out = []
    for xb in x:
        Q, K, V = xb @ W_theta, xb @ W_phi, xb @ W_g
        S = Q @ K.T
        S = S - S.max(axis=1, keepdims=True)
        E = np.exp(S)
        out.append((E / E.sum(axis=1, keepdims=True)) @ V)
    return np.stack(out)
