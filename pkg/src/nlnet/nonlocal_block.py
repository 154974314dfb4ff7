"""The non-local operation and the residual non-local block.

For an input ``x[B,T,H,W,C]`` each batch item is flattened to ``N = T*H*W``
positions. Queries, keys and values are 1x1x1 embeddings of ``x`` (queries and
keys are ``x`` itself for the plain Gaussian kind); keys and values can be
spatially max-pooled by the subsample factor. The normalised affinity ``P``
(N x M) aggregates the values, ``y = P g``, and the block returns
``z = BN(y W_z) + x``. With the BN scale initialised to zero the block is an
exact identity at construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as F
from .cost import CostReport
from .errors import ConfigError, ShapeError
from .nn import Module, he_normal
from .pairwise import AffinityMatrix, PairwiseKind, normalize, pairwise_scores
from .tensor import Tensor


class MaskMode(str, enum.Enum):
    SPACETIME = "spacetime"
    SPACE_ONLY = "space_only"
    TIME_ONLY = "time_only"

    @classmethod
    def parse(cls, value) -> "MaskMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(
                f"unknown mask {value!r}; expected one of {', '.join(m.value for m in cls)}"
            ) from None


@dataclass(frozen=True)
class NonLocalConfig:
    """Hyperparameters of one block.

    ``channels_in=0`` marks a template whose width is filled in at insertion
    time; ``bottleneck=None`` means half the input channels.
    """

    kind: PairwiseKind = PairwiseKind.EMBEDDED_GAUSSIAN
    channels_in: int = 0
    bottleneck: int | None = None
    mask: MaskMode = MaskMode.SPACETIME
    subsample_spatial: int = 1
    use_bn_on_Wz: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", PairwiseKind.parse(self.kind))
        object.__setattr__(self, "mask", MaskMode.parse(self.mask))
        if self.subsample_spatial not in (1, 2):
            raise ConfigError(f"subsample_spatial must be 1 or 2, got {self.subsample_spatial}")
        if self.channels_in < 0:
            raise ConfigError(f"channels_in must be >= 0, got {self.channels_in}")
        if self.bottleneck is not None and self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")

    @property
    def width(self) -> int:
        if self.bottleneck is not None:
            return self.bottleneck
        return max(1, self.channels_in // 2)

    def with_channels(self, channels: int) -> "NonLocalConfig":
        return replace(self, channels_in=int(channels))

    def check_input(self, shape: tuple) -> None:
        if len(shape) != 5:
            raise ShapeError(f"non-local block expects [B,T,H,W,C], got {shape}")
        if shape[-1] != self.channels_in:
            raise ShapeError(f"non-local block built for {self.channels_in} channels, got {shape[-1]}")
        s = self.subsample_spatial
        if s != 1 and (shape[2] % s or shape[3] % s):
            raise ConfigError(f"subsample factor {s} must divide H={shape[2]} and W={shape[3]}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "channels_in": self.channels_in, "bottleneck": self.bottleneck,
            "mask": self.mask.value, "subsample_spatial": self.subsample_spatial,
            "use_bn_on_Wz": self.use_bn_on_Wz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NonLocalConfig":
        return cls(**d)


@dataclass
class NonLocalParams:
    W_g: Tensor
    W_theta: Tensor | None
    W_phi: Tensor | None
    w_f: Tensor | None
    W_z: Tensor
    bn_gamma: Tensor | None
    bn_beta: Tensor | None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None

    @classmethod
    def init(cls, cfg: NonLocalConfig, rng: np.random.Generator) -> "NonLocalParams":
        """He-normal embeddings; zero BN scale (or zero ``W_z`` without BN)."""
        C, b = cfg.channels_in, cfg.width
        if C < 1:
            raise ConfigError("NonLocalConfig.channels_in must be set before initialising parameters")

        def w(shape, fan_in):
            return Tensor(he_normal(rng, shape, fan_in), requires_grad=True)

        W_g = w((C, b), C)
        W_theta = W_phi = w_f = None
        if cfg.kind.has_embeddings:
            W_theta, W_phi = w((C, b), C), w((C, b), C)
        if cfg.kind is PairwiseKind.CONCATENATION:
            w_f = w((2 * b,), 2 * b)
        if cfg.use_bn_on_Wz:
            W_z = w((b, C), b)
            return cls(W_g, W_theta, W_phi, w_f, W_z,
                       Tensor(np.zeros(C), requires_grad=True), Tensor(np.zeros(C), requires_grad=True),
                       np.zeros(C), np.ones(C))
        W_z = Tensor(np.zeros((b, C)), requires_grad=True)
        return cls(W_g, W_theta, W_phi, w_f, W_z, None, None)

    def named(self) -> dict[str, Tensor]:
        out = {"W_g": self.W_g, "W_theta": self.W_theta, "W_phi": self.W_phi, "w_f": self.w_f,
               "W_z": self.W_z, "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta}
        return {k: v for k, v in out.items() if v is not None}

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bn_running_mean is None:
            return {}
        return {"bn_running_mean": self.bn_running_mean, "bn_running_var": self.bn_running_var}


def attention_mask(query_grid: tuple, key_grid: tuple, mode: MaskMode) -> np.ndarray | None:
    """Boolean ``[N, M]`` admissibility for the summation index, or None for spacetime.

    Under spatial subsampling a time_only query admits the pooled key cells
    that contain its own position.
    """
    mode = MaskMode.parse(mode)
    if mode is MaskMode.SPACETIME:
        return None
    T, H, W = query_grid
    Tk, Hk, Wk = key_grid
    qt, qh, qw = (a.reshape(-1) for a in np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij"))
    kt, kh, kw = (a.reshape(-1) for a in np.meshgrid(np.arange(Tk), np.arange(Hk), np.arange(Wk), indexing="ij"))
    if mode is MaskMode.SPACE_ONLY:
        if Tk != T:
            raise ShapeError("space_only mask needs keys on the query time grid")
        return qt[:, None] == kt[None, :]
    if Hk == 0 or Wk == 0 or H % Hk or W % Wk:
        raise ShapeError(f"time_only mask needs a key grid that tiles the query grid, got {key_grid} for {query_grid}")
    sh, sw = H // Hk, W // Wk
    return (qh[:, None] // sh == kh[None, :]) & (qw[:, None] // sw == kw[None, :])


def _embed(x_flat: Tensor, w: Tensor | None) -> Tensor:
    return x_flat if w is None else F.matmul(x_flat, w)


def _subsample(t_flat: Tensor, grid: tuple, factor: int) -> tuple[Tensor, tuple]:
    if factor == 1:
        return t_flat, grid
    B = t_flat.shape[0]
    T, H, W = grid
    d = t_flat.shape[-1]
    pooled = F.max_pool3d(F.reshape(t_flat, (B, T, H, W, d)), (1, factor, factor), (1, factor, factor))
    kgrid = pooled.shape[1:4]
    return F.reshape(pooled, (B, kgrid[0] * kgrid[1] * kgrid[2], d)), kgrid


def nonlocal_affinity(x: Tensor, p: NonLocalParams, cfg: NonLocalConfig) -> tuple[AffinityMatrix, Tensor, tuple]:
    """Normalised affinity ``[B, N, M]``, the values ``g(x^)`` ``[B, M, b]`` and the key grid."""
    cfg.check_input(x.shape)
    B, T, H, W, C = x.shape
    N = T * H * W
    xf = F.reshape(x, (B, N, C))
    q = _embed(xf, p.W_theta)
    k, kgrid = _subsample(_embed(xf, p.W_phi), (T, H, W), cfg.subsample_spatial)
    v, _ = _subsample(F.matmul(xf, p.W_g), (T, H, W), cfg.subsample_spatial)
    scores = pairwise_scores(cfg.kind, q, k, p.w_f)
    mask = attention_mask((T, H, W), kgrid, cfg.mask)
    return normalize(scores, mask), v, kgrid


def nonlocal_forward(x: Tensor, p: NonLocalParams, cfg: NonLocalConfig) -> Tensor:
    """``y = P g(x^)`` reshaped to ``[B, T, H, W, bottleneck]``."""
    aff, v, _ = nonlocal_affinity(x, p, cfg)
    y = F.matmul(aff.values, v)
    B, T, H, W, _ = x.shape
    return F.reshape(y, (B, T, H, W, v.shape[-1]))


def block_forward(x: Tensor, p: NonLocalParams, cfg: NonLocalConfig, training: bool = True,
                  bn_momentum: float = 0.9, _record: dict | None = None) -> Tensor:
    """Residual block ``z = BN(y W_z) + x``."""
    aff, v, kgrid = nonlocal_affinity(x, p, cfg)
    if _record is not None:
        _record["affinity"] = aff.values.data.copy()
        _record["key_grid"] = kgrid
        _record["query_grid"] = tuple(x.shape[1:4])
        _record["kind"] = aff.kind
    B, T, H, W, C = x.shape
    y = F.matmul(aff.values, v)
    wz = F.matmul(y, p.W_z)
    if p.bn_gamma is not None:
        wz = F.batch_norm(wz, p.bn_gamma, p.bn_beta, p.bn_running_mean, p.bn_running_var,
                          training=training, momentum=bn_momentum)
    return F.add(F.reshape(wz, x.shape), x)


class NonLocalBlock(Module):
    """Module wrapper around :func:`block_forward` for use inside networks."""

    kind_name = "nonlocal"

    def __init__(self, cfg: NonLocalConfig, rng: np.random.Generator | None = None,
                 name: str = "", allocate: bool = True):
        super().__init__()
        self.cfg = cfg
        self.name = name
        self.params = NonLocalParams.init(cfg, rng if rng is not None else np.random.default_rng(0)) if allocate else None
        self.record_attention = False
        self.last_record: dict | None = None
        self.frozen_bn = False

    def own_parameters(self):
        return self.params.named() if self.params is not None else {}

    def own_buffers(self):
        return self.params.buffers() if self.params is not None else {}

    def forward(self, x: Tensor) -> Tensor:
        rec = {} if self.record_attention else None
        z = block_forward(x, self.params, self.cfg, training=self.training and not self.frozen_bn, _record=rec)
        if rec is not None:
            self.last_record = rec
        return z

    def out_shape(self, shape):
        return shape

    def cost(self, shape) -> CostReport:
        T, H, W, _ = shape
        return count_block_cost(self.cfg, T, H, W)


def count_block_cost(cfg: NonLocalConfig, T: int, H: int, W: int) -> CostReport:
    """Parameters and multiply-adds of one block on a ``T x H x W`` map.

    Embedding maps are charged on all ``N`` positions (pooling follows the
    embedding), pairwise and aggregation on ``N x M`` with
    ``M = N / subsample**2``.
    """
    C, b = cfg.channels_in, cfg.width
    s = cfg.subsample_spatial
    if s != 1 and (H % s or W % s):
        raise ConfigError(f"subsample factor {s} must divide H={H} and W={W}")
    N = T * H * W
    M = T * (H // s) * (W // s)
    rep = CostReport(label="nonlocal")
    rep.add("g", C * b, N * C * b, "embedding")
    d = C
    if cfg.kind.has_embeddings:
        rep.add("theta", C * b, N * C * b, "embedding")
        rep.add("phi", C * b, N * C * b, "embedding")
        d = b
    if cfg.kind is PairwiseKind.CONCATENATION:
        # w_f . [theta_i, phi_j] per pair, as defined; the outer-sum evaluation is cheaper
        rep.add("pairwise", 2 * b, N * M * 2 * b, "pairwise")
    else:
        rep.add("pairwise", 0, N * M * d, "pairwise")
    rep.add("aggregate", 0, N * M * b, "aggregate")
    rep.add("W_z", b * C, N * b * C, "output")
    if cfg.use_bn_on_Wz:
        rep.add("bn", 2 * C, 0, "bn")
    return rep
