"""C2D / I3D residual video backbones with non-local block insertion.

The architecture follows the ResNet-50 C2D layout: a ``1x7x7`` stem, a
``3x3x3`` max pool, four bottleneck stages with a temporal ``3x1x1`` max pool
after res2, then global average pooling, dropout and a linear classifier.
Activations are channels-last ``[B, T, H, W, C]``.

Each stage is an ordered list of *units*: standard bottleneck blocks named
``<stage>.b<i>``, inserted non-local blocks ``<stage>.nl<j>`` and optional
depth-control bottlenecks ``<stage>.x<j>``. Insertions are addressed by *gap*:
gap ``g`` of a stage with ``n`` residual blocks is the slot right before
``b<g>`` (``g == n`` is the end of the stage).
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import tensor as F
from .cost import CostReport
from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Conv3d, Dropout, Linear, MaxPool3d, Module, layer_rng
from .nonlocal_block import NonLocalBlock, NonLocalConfig, count_block_cost
from .tensor import Tensor

STAGE_NAMES = ("res2", "res3", "res4", "res5")


class Inflation(str, enum.Enum):
    NONE = "none"
    I3D_3X3X3 = "3x3x3"
    I3D_3X1X1 = "3x1x1"

    @classmethod
    def parse(cls, value) -> "Inflation":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("i3d_", "").replace("c2d", "none")
        try:
            return cls(v)
        except ValueError:
            raise ConfigError(f"unknown inflation {value!r}; expected none, 3x3x3 or 3x1x1") from None


@dataclass(frozen=True)
class StageSpec:
    name: str
    num_blocks: int
    bottleneck: int
    out: int
    spatial_stride: int

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {self.name!r}")
        if self.num_blocks < 1 or self.bottleneck < 1:
            raise ConfigError(f"stage {self.name} needs >= 1 block and width >= 1")
        if self.out != 4 * self.bottleneck:
            raise ConfigError(f"stage {self.name}: out ({self.out}) must be 4 x bottleneck ({self.bottleneck})")


@dataclass(frozen=True)
class Insertion:
    stage: str
    gap: int
    config: NonLocalConfig | None = None  # None marks a depth-control residual block


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple[StageSpec, ...]
    in_channels: int = 3
    num_classes: int = 400
    input_shape: tuple[int, int, int] = (32, 224, 224)
    conv1_channels: int = 64
    conv1_kernel: tuple[int, int, int] = (1, 7, 7)
    conv1_stride: tuple[int, int, int] = (2, 2, 2)
    pool1: tuple = ((3, 3, 3), (2, 2, 2), (1, 1, 1))
    pool2: tuple = ((3, 1, 1), (2, 1, 1), (1, 0, 0))
    inflation: Inflation = Inflation.NONE
    temporal_pad: str = "zero"
    insertions: tuple[Insertion, ...] = ()
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "inflation", Inflation.parse(self.inflation))
        if self.temporal_pad not in F.PAD_MODES:
            raise ConfigError(f"temporal_pad must be one of {F.PAD_MODES}")
        names = [s.name for s in self.stages]
        if names != list(STAGE_NAMES):
            raise ConfigError(f"stages must be {STAGE_NAMES}, got {names}")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.bottleneck != 2 * a.bottleneck:
                raise ConfigError(f"channels must double per stage ({a.name} -> {b.name})")

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise ConfigError(f"unknown stage {name!r}")

    def to_dict(self) -> dict:
        return {
            "stages": [vars(s).copy() for s in self.stages],
            "in_channels": self.in_channels, "num_classes": self.num_classes,
            "input_shape": list(self.input_shape), "conv1_channels": self.conv1_channels,
            "conv1_kernel": list(self.conv1_kernel), "conv1_stride": list(self.conv1_stride),
            "pool1": [list(v) for v in self.pool1], "pool2": [list(v) for v in self.pool2],
            "inflation": self.inflation.value, "temporal_pad": self.temporal_pad,
            "insertions": [
                {"stage": i.stage, "gap": i.gap, "config": None if i.config is None else i.config.to_dict()}
                for i in self.insertions
            ],
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        for k in ("input_shape", "conv1_kernel", "conv1_stride"):
            d[k] = tuple(d[k])
        for k in ("pool1", "pool2"):
            d[k] = tuple(tuple(v) for v in d[k])
        d["insertions"] = tuple(
            Insertion(i["stage"], i["gap"], None if i["config"] is None else NonLocalConfig.from_dict(i["config"]))
            for i in d["insertions"]
        )
        return cls(**d)


def resnet50_spec(**overrides) -> NetworkSpec:
    """Full-size ResNet-50 C2D for 32x224x224 clips."""
    stages = (
        StageSpec("res2", 3, 64, 256, 1),
        StageSpec("res3", 4, 128, 512, 2),
        StageSpec("res4", 6, 256, 1024, 2),
        StageSpec("res5", 3, 512, 2048, 2),
    )
    return replace(NetworkSpec(stages=stages), **overrides)


def desk_spec(**overrides) -> NetworkSpec:
    """Desk-scale preset: channels / 8, blocks {1,1,2,1}, 8x32x32 single-channel clips.

    The stem keeps full temporal resolution (stride 1,2,2) so that two frames
    remain for res3/res4 after the two temporal pools.
    """
    full = resnet50_spec()
    stages = tuple(
        StageSpec(s.name, n, s.bottleneck // 8, s.out // 8, s.spatial_stride)
        for s, n in zip(full.stages, (1, 1, 2, 1))
    )
    base = replace(full, stages=stages, in_channels=1, num_classes=2, input_shape=(8, 32, 32),
                   conv1_channels=8, conv1_stride=(1, 2, 2))
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Bottleneck(Module):
    """``1x1 -> 3x3 -> 1x1`` residual unit; the spatial stride sits on the 3x3."""

    kind_name = "residual"

    def __init__(self, name: str, cin: int, planes: int, cout: int, stride: int, seed: int,
                 allocate: bool = True, zero_init_last: bool = False, temporal_pad: str = "zero"):
        super().__init__()
        self.name = name
        self.cin, self.planes, self.cout, self.stride = cin, planes, cout, stride

        def rng(part):
            return layer_rng(seed, f"{name}.{part}")

        kw = dict(allocate=allocate, pad_mode=temporal_pad)
        self.conv_a = Conv3d(cin, planes, (1, 1, 1), rng=rng("conv_a"), **kw)
        self.bn_a = BatchNorm(planes, allocate=allocate)
        self.conv_b = Conv3d(planes, planes, (1, 3, 3), (1, stride, stride), rng=rng("conv_b"), **kw)
        self.bn_b = BatchNorm(planes, allocate=allocate)
        self.conv_c = Conv3d(planes, cout, (1, 1, 1), rng=rng("conv_c"), **kw)
        self.bn_c = BatchNorm(cout, allocate=allocate, zero_init=zero_init_last)
        self.shortcut = self.bn_s = None
        if stride != 1 or cin != cout:
            self.shortcut = Conv3d(cin, cout, (1, 1, 1), (1, stride, stride), rng=rng("shortcut"), **kw)
            self.bn_s = BatchNorm(cout, allocate=allocate)

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn_a(self.conv_a(x)))
        h = F.relu(self.bn_b(self.conv_b(h)))
        h = self.bn_c(self.conv_c(h))
        s = x if self.shortcut is None else self.bn_s(self.shortcut(x))
        return F.relu(F.add(h, s))

    def out_shape(self, shape):
        return self.conv_c.out_shape(self.conv_b.out_shape(self.conv_a.out_shape(shape)))

    def cost(self, shape) -> CostReport:
        rep = CostReport(label=self.name)
        s1 = shape
        for lname in ("conv_a", "bn_a", "conv_b", "bn_b", "conv_c", "bn_c"):
            layer = getattr(self, lname)
            p, m = layer.cost(s1)
            rep.add(lname, p, m, "bn" if lname.startswith("bn") else "conv")
            s1 = layer.out_shape(s1)
        if self.shortcut is not None:
            p, m = self.shortcut.cost(shape)
            rep.add("shortcut", p, m, "conv")
            rep.add("bn_s", *self.bn_s.cost(shape), "bn")
        return rep


class Network(Module):
    """A built backbone. Construct with :func:`build_network`."""

    def __init__(self, spec: NetworkSpec, seed: int, allocate: bool = True):
        super().__init__()
        self.spec = spec
        self.seed = int(seed)
        self.allocated = allocate
        self.inflation = Inflation.NONE
        self.conv1 = Conv3d(spec.in_channels, spec.conv1_channels, spec.conv1_kernel, spec.conv1_stride,
                            padding=(0, spec.conv1_kernel[1] // 2, spec.conv1_kernel[2] // 2),
                            rng=layer_rng(seed, "conv1"), allocate=allocate, pad_mode=spec.temporal_pad)
        self.bn1 = BatchNorm(spec.conv1_channels, allocate=allocate)
        self.pool1 = MaxPool3d(*spec.pool1)
        self.pool2 = MaxPool3d(*spec.pool2)
        self.stages: dict[str, list[Module]] = {}
        cin = spec.conv1_channels
        for st in spec.stages:
            units = []
            for i in range(st.num_blocks):
                units.append(Bottleneck(f"{st.name}.b{i}", cin if i == 0 else st.out, st.bottleneck, st.out,
                                        st.spatial_stride if i == 0 else 1, seed, allocate,
                                        temporal_pad=spec.temporal_pad))
            self.stages[st.name] = units
            cin = st.out
        self.dropout = Dropout(spec.dropout, seed)
        self.fc = Linear(cin, spec.num_classes, rng=layer_rng(seed, "fc"), allocate=allocate)
        applied = spec.insertions
        self.spec = replace(spec, insertions=(), inflation=Inflation.NONE)
        for ins in applied:
            self._insert(ins)
        if spec.inflation is not Inflation.NONE:
            _inflate_in_place(self, spec.inflation)

    # -- module tree -----------------------------------------------------
    def children(self):
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        for units in self.stages.values():
            for u in units:
                yield u.name, u
        yield "dropout", self.dropout
        yield "fc", self.fc

    def units(self):
        for units in self.stages.values():
            yield from units

    def block(self, name: str) -> Module:
        for u in self.units():
            if u.name == name:
                return u
        raise KeyError(f"no unit named {name!r}; available: {[u.name for u in self.units()]}")

    def nonlocal_blocks(self) -> list[NonLocalBlock]:
        return [u for u in self.units() if isinstance(u, NonLocalBlock)]

    def set_bn_frozen(self, frozen: bool) -> None:
        for m in _walk(self):
            if isinstance(m, BatchNorm):
                m.frozen = frozen
            elif isinstance(m, NonLocalBlock):
                m.frozen_bn = frozen

    # -- forward ---------------------------------------------------------
    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 5 or x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"expected [B,T,H,W,{self.spec.in_channels}] input, got {x.shape}")
        h = self.pool1(F.relu(self.bn1(self.conv1(x))))
        for name, units in self.stages.items():
            for u in units:
                h = u(h)
            if name == "res2":
                h = self.pool2(h)
        return h

    def forward(self, x) -> Tensor:
        h = F.global_avg_pool(self.features(x))
        return self.fc(self.dropout(h))

    # -- shapes and costs -----------------------------------------------
    def trace_shapes(self, input_shape=None) -> list[tuple[str, tuple]]:
        """``(layer, output (T,H,W,C))`` after the stem, pools and each stage."""
        T, H, W = input_shape or self.spec.input_shape
        s = (T, H, W, self.spec.in_channels)
        trace = []
        s = self.conv1.out_shape(s)
        trace.append(("conv1", s))
        s = self.pool1.out_shape(s)
        trace.append(("pool1", s))
        for name, units in self.stages.items():
            for u in units:
                s = u.out_shape(s)
            trace.append((name, s))
            if name == "res2":
                s = self.pool2.out_shape(s)
                trace.append(("pool2", s))
        return trace

    # -- insertion -------------------------------------------------------
    def _insert(self, ins: Insertion) -> Module:
        st = self.spec.stage(ins.stage)
        units = self.stages[ins.stage]
        if not 0 <= ins.gap <= st.num_blocks:
            raise ConfigError(f"gap {ins.gap} out of range for {ins.stage} with {st.num_blocks} blocks")
        if ins.gap < st.num_blocks:
            pos = next(i for i, u in enumerate(units) if u.name == f"{ins.stage}.b{ins.gap}")
            channels = units[pos].cin
        else:
            pos = len(units)
            channels = st.out
        if ins.config is not None:
            j = sum(isinstance(u, NonLocalBlock) for u in units)
            name = f"{ins.stage}.nl{j}"
            cfg = ins.config if ins.config.channels_in == channels else ins.config.with_channels(channels)
            unit = NonLocalBlock(cfg, layer_rng(self.seed, name), name=name, allocate=self.allocated)
            ins = Insertion(ins.stage, ins.gap, cfg)
        else:
            j = sum(u.name.startswith(f"{ins.stage}.x") for u in units)
            name = f"{ins.stage}.x{j}"
            unit = Bottleneck(name, channels, channels // 4, channels, 1, self.seed, self.allocated,
                              zero_init_last=True, temporal_pad=self.spec.temporal_pad)
        unit.train(self.training)
        units.insert(pos, unit)
        self.spec = replace(self.spec, insertions=self.spec.insertions + (ins,))
        return unit


def _walk(m: Module):
    yield m
    for _, c in m.children():
        yield from _walk(c)


def build_network(spec: NetworkSpec, width_scale: float = 1.0, depth_scale: float = 1.0,
                  seed: int = 0, allocate: bool = True) -> Network:
    """Instantiate ``spec`` with channel and block counts scaled.

    Scaled widths and depths must be whole numbers; initial parameters depend
    only on ``seed`` and each layer's name.
    """
    if width_scale != 1.0 or depth_scale != 1.0:
        spec = scale_spec(spec, width_scale, depth_scale)
    return Network(spec, seed, allocate)


def scale_spec(spec: NetworkSpec, width_scale: float, depth_scale: float) -> NetworkSpec:
    def exact(v, scale, what):
        r = Fraction(v) * Fraction(scale).limit_denominator(1 << 20)
        if r.denominator != 1 or r < 1:
            raise ConfigError(f"{what}: {v} x {scale} is not a positive whole number")
        return int(r)

    stages = tuple(
        StageSpec(s.name, exact(s.num_blocks, depth_scale, f"{s.name} blocks"),
                  exact(s.bottleneck, width_scale, f"{s.name} width"),
                  exact(s.out, width_scale, f"{s.name} out"), s.spatial_stride)
        for s in spec.stages
    )
    return replace(spec, stages=stages, conv1_channels=exact(spec.conv1_channels, width_scale, "conv1 width"))


# ---------------------------------------------------------------------------
# inflation
# ---------------------------------------------------------------------------


def inflate(net2d: Network, variant, t: int = 3, conv1_t: int = 5, temporal_pad: str | None = None) -> Network:
    """Return an I3D copy of a C2D network.

    Every temporal plane of an inflated ``t x k x k`` kernel is the 2-D kernel
    divided by ``t`` (the last plane absorbs the rounding remainder, so the
    exact sum of the planes is the 2-D kernel). One residual block in two (the even-indexed ones of each
    stage) is inflated: its 3x3 for ``3x3x3``, its first 1x1 for ``3x1x1``.
    The stem becomes ``conv1_t x 7 x 7``. ``temporal_pad`` overrides the
    network's temporal padding mode for the inflated kernels.
    """
    variant = Inflation.parse(variant)
    if variant is Inflation.NONE:
        raise ConfigError("inflate needs a 3x3x3 or 3x1x1 variant")
    if net2d.inflation is not Inflation.NONE:
        raise ConfigError(f"network is already inflated ({net2d.inflation.value})")
    net = copy.deepcopy(net2d)
    _inflate_in_place(net, variant, t, conv1_t, temporal_pad)
    return net


def _inflate_in_place(net: Network, variant: Inflation, t: int = 3, conv1_t: int = 5,
                      temporal_pad: str | None = None) -> None:
    if temporal_pad is not None and temporal_pad not in F.PAD_MODES:
        raise ConfigError(f"temporal_pad must be one of {F.PAD_MODES}")
    _inflate_conv(net.conv1, conv1_t, temporal_pad)
    for units in net.stages.values():
        blocks = [u for u in units if isinstance(u, Bottleneck) and ".b" in u.name]
        for i, blk in enumerate(blocks):
            if i % 2 == 0:
                _inflate_conv(blk.conv_b if variant is Inflation.I3D_3X3X3 else blk.conv_a, t, temporal_pad)
    net.inflation = variant
    # only temporal kernels pad in time, so the override is the network's mode from here on
    net.spec = replace(net.spec, inflation=variant, temporal_pad=temporal_pad or net.spec.temporal_pad)


def _inflate_conv(conv: Conv3d, t: int, temporal_pad: str | None = None) -> None:
    if conv.kernel[0] != 1:
        raise ConfigError("kernel is already temporal")
    if temporal_pad is not None:
        conv.pad_mode = temporal_pad
    conv.kernel = (t,) + conv.kernel[1:]
    conv.padding = (t // 2,) + conv.padding[1:]
    if conv.weight is not None:
        w2d = conv.weight.data[0]
        planes = np.repeat((w2d / t)[None], t, axis=0)
        # the last plane takes the rounding remainder so the planes sum to w2d exactly
        planes[-1] = w2d - (t - 1) * planes[0]
        conv.weight = Tensor(planes, requires_grad=True)


# ---------------------------------------------------------------------------
# non-local insertion policies
# ---------------------------------------------------------------------------

POLICY_COUNTS = {"one": {"res4": 1}, "five": {"res3": 2, "res4": 3}, "ten": {"res3": 4, "res4": 6}}


def _spread(n: int, m: int, every_other: bool) -> list[int]:
    if m <= n:
        if every_other and 2 * m - 1 <= n:
            return sorted(n - 1 - 2 * i for i in range(m))
        return sorted(n - 1 - i for i in range(m))
    # more blocks than residual blocks: spread over the n+1 gaps proportionally
    return [int(v) for v in np.floor(np.linspace(0, n, m) + 0.5)]


def policy_gaps(policy, spec: NetworkSpec) -> list[tuple[str, int]]:
    """Map a named policy (or explicit ``[(stage, gap), ...]``) to insertion gaps.

    ``one``: right before the last res4 block. ``five``: 2 in res3 and 3 in
    res4, every other block counting back from the last. ``ten``: 4 in res3
    and 6 in res4, before every block. Stages with fewer blocks than requested
    insertions spread them proportionally over all gaps.
    """
    if not isinstance(policy, str):
        out = [(str(s), int(g)) for s, g in policy]
        for s, g in out:
            st = spec.stage(s)
            if not 0 <= g <= st.num_blocks:
                raise ConfigError(f"gap {g} out of range for {s} ({st.num_blocks} blocks)")
        return out
    if policy not in POLICY_COUNTS:
        raise ConfigError(f"unknown policy {policy!r}; expected one of {sorted(POLICY_COUNTS)} or a list")
    out = []
    for stage, m in POLICY_COUNTS[policy].items():
        n = spec.stage(stage).num_blocks
        out += [(stage, g) for g in _spread(n, m, every_other=policy != "ten")]
    return out


def insert_nonlocal(net: Network, policy, cfg: NonLocalConfig) -> Network:
    """Copy of ``net`` with identity-initialised non-local blocks inserted."""
    out = copy.deepcopy(net)
    for stage, gap in policy_gaps(policy, net.spec):
        out._insert(Insertion(stage, gap, cfg))
    return out


def insert_residual_control(net: Network, policy, cfg: NonLocalConfig) -> Network:
    """Depth control: standard bottlenecks instead of non-local blocks.

    At every gap ``policy`` names, the number of extra blocks is chosen so
    their parameters best match the non-local block that would go there. The
    extra blocks start as identities (zero final BN scale).
    """
    shape_map = _gap_shapes(net)
    out = copy.deepcopy(net)
    for stage, gap in policy_gaps(policy, net.spec):
        shape = shape_map[(stage, gap)]
        C = shape[-1]
        nl_params = count_block_cost(cfg.with_channels(C), *shape[:3]).total_params
        per_block = Bottleneck("probe", C, C // 4, C, 1, 0, allocate=False).cost(shape).total_params
        for _ in range(max(1, int(nl_params / per_block + 0.5))):
            out._insert(Insertion(stage, gap, None))
    return out


def _gap_shapes(net: Network, input_shape=None) -> dict[tuple[str, int], tuple]:
    """Activation shape (T,H,W,C) seen at every gap of every stage."""
    T, H, W = input_shape or net.spec.input_shape
    s = net.pool1.out_shape(net.conv1.out_shape((T, H, W, net.spec.in_channels)))
    out = {}
    for name, units in net.stages.items():
        g = 0
        for u in units:
            if isinstance(u, Bottleneck) and u.name == f"{name}.b{g}":
                out[(name, g)] = s
                g += 1
            s = u.out_shape(s)
        out[(name, g)] = s
        if name == "res2":
            s = net.pool2.out_shape(s)
    return out


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

def count_network_cost(net: Network, input_shape=None, label: str = "") -> CostReport:
    """Parameters and multiply-adds of ``net`` for a single ``(T,H,W)`` clip."""
    T, H, W = input_shape or net.spec.input_shape
    rep = CostReport(input_shape=(T, H, W), label=label or _default_label(net))
    s = (T, H, W, net.spec.in_channels)
    rep.add("conv1", *net.conv1.cost(s), "conv")
    s = net.conv1.out_shape(s)
    rep.add("bn1", *net.bn1.cost(s), "bn")
    s = net.pool1.out_shape(s)
    for name, units in net.stages.items():
        for u in units:
            rep.extend(u.cost(s), prefix=u.name + ".")
            s = u.out_shape(s)
        if name == "res2":
            s = net.pool2.out_shape(s)
    rep.add("fc", *net.fc.cost(s), "fc")
    return rep


def _default_label(net: Network) -> str:
    base = "C2D" if net.inflation is Inflation.NONE else f"I3D_{net.inflation.value}"
    n = len(net.nonlocal_blocks())
    return f"NL-{base}-{n}" if n else base
