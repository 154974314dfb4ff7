"""Self-check suites: oracle equivalence, gradient checks and network invariants.

Each check yields a :class:`Check` with the measured error and its tolerance;
a suite passes when every check does. Suites are grouped by scope:
``ops`` (tensor ops), ``block`` (non-local block), ``backbone`` (networks).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from . import oracles
from . import tensor as F
from .backbones import (Inflation, build_network, count_network_cost, desk_spec, inflate, insert_nonlocal,
                        insert_residual_control, policy_gaps)
from .errors import ConfigError
from .nonlocal_block import MaskMode, NonLocalConfig, NonLocalParams, block_forward, count_block_cost
from .pairwise import PairwiseKind
from .tensor import Tensor, no_grad

SCOPES = ("ops", "block", "backbone", "all")
GRAD_TOL = 1e-4
BLOCK_TOL = 1e-8


@dataclass
class Check:
    suite: str
    name: str
    error: float
    tol: float
    detail: str = ""
    seconds: float = 0.0  # wall clock, reported on the console only

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tol

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{mark}  {self.suite:<9} {self.name:<52} err={self.error:.3e}  tol={self.tol:.0e}{extra}"


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    # sum(out * r) so that every output entry gets its own upstream gradient
    return F.tsum(F.mul(out, r))


def _away_from_zero(rng, shape, margin=0.1):
    v = rng.uniform(margin, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def op_grad_cases(rng: np.random.Generator):
    """``(name, f, params)`` triples for :func:`tensor.grad_check`."""

    def T(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    def R(shape):
        return rng.standard_normal(shape)

    a, b = T(3, 4), T(4)
    ra = R((3, 4))
    yield "add (broadcast)", lambda: _weighted(F.add(a, b), ra), [a, b]
    yield "sub (broadcast)", lambda: _weighted(F.sub(a, b), ra), [a, b]
    c = T(3, 1)
    yield "mul (broadcast)", lambda: _weighted(F.mul(a, c), ra), [a, c]
    r3 = R((4,))
    yield "tsum (axis)", lambda: _weighted(F.tsum(a, axis=0), r3), [a]
    yield "mean", lambda: F.mean(F.mul(a, ra)), [a]
    r6 = R((6, 2))
    yield "reshape", lambda: _weighted(F.reshape(a, (6, 2)), r6), [a]
    p = T(2, 3, 4)
    rp = R((4, 2, 3))
    yield "permute", lambda: _weighted(F.permute(p, (2, 0, 1)), rp), [p]
    rs = R((2, 2, 4))
    yield "slice_axis", lambda: _weighted(F.slice_axis(p, 1, 1, 3), rs), [p]
    q = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    yield "relu", lambda: _weighted(F.relu(q), ra), [q]
    u, v = T(2, 3), T(2, 4)
    ro = R((2, 3, 4))
    yield "outer_sum", lambda: _weighted(F.outer_sum(u, v), ro), [u, v]
    m1, m2 = T(2, 3, 4), T(4, 5)
    rm = R((2, 3, 5))
    yield "matmul (batched x shared)", lambda: _weighted(F.matmul(m1, m2), rm), [m1, m2]
    m3 = T(2, 5, 4)
    rm3 = R((2, 3, 5))
    yield "matmul (batched x batched^T)", lambda: _weighted(F.matmul(m1, F.permute(m3, (0, 2, 1))), rm3), [m1, m3]
    x, w, bb = T(5, 3), T(3, 2), T(2)
    rl = R((5, 2))
    yield "linear", lambda: _weighted(F.linear(x, w, bb), rl), [x, w, bb]
    s = T(2, 3, 5, scale=2.0)
    rsm = R((2, 3, 5))
    yield "softmax_rows", lambda: _weighted(F.softmax_rows(s), rsm), [s]
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    yield "softmax_rows (masked)", lambda: _weighted(F.softmax_rows(s, mask), rsm), [s]
    lg = T(4, 3)
    labels = np.array([0, 2, 1, 2])
    yield "cross_entropy", lambda: F.cross_entropy(lg, labels), [lg]
    cx, cw = T(1, 3, 4, 4, 2), T(3, 3, 3, 2, 2)
    rc = R((1, 3, 4, 4, 2))
    yield "conv3d 3x3x3 zero pad", lambda: _weighted(F.conv3d(cx, cw, 1, 1), rc), [cx, cw]
    yield "conv3d 3x3x3 replicate_time", lambda: _weighted(F.conv3d(cx, cw, 1, 1, "replicate_time"), rc), [cx, cw]
    cw2 = T(1, 3, 3, 2, 3)
    rc2 = R((1, 3, 2, 2, 3))
    yield "conv3d 1x3x3 stride 2", lambda: _weighted(F.conv3d(cx, cw2, (1, 2, 2), (0, 1, 1)), rc2), [cx, cw2]
    cw3 = T(1, 1, 1, 2, 3)
    rc3 = R((1, 3, 4, 4, 3))
    yield "conv3d 1x1x1", lambda: _weighted(F.conv3d(cx, cw3), rc3), [cx, cw3]
    # distinct values keep the max away from ties
    px = Tensor(rng.permutation(2 * 4 * 4 * 4 * 2).reshape(2, 4, 4, 4, 2) * 0.1, requires_grad=True)
    rpool = R((2, 2, 2, 2, 2))
    yield "max_pool3d 3x3x3 s2 p1", lambda: _weighted(F.max_pool3d(px, 3, 2, 1), rpool), [px]
    rpool2 = R((2, 4, 2, 2, 2))
    yield "max_pool3d 1x2x2", lambda: _weighted(F.max_pool3d(px, (1, 2, 2)), rpool2), [px]
    rg = R((2, 2))
    yield "global_avg_pool", lambda: _weighted(F.global_avg_pool(px), rg), [px]
    bx, gm, bt = T(2, 3, 2, 2, 3), T(3), T(3)
    rb = R((2, 3, 2, 2, 3))
    rmean, rvar = np.zeros(3), np.ones(3)
    yield "batch_norm (train)", lambda: _weighted(F.batch_norm(bx, gm, bt, rmean.copy(), rvar.copy(), True), rb), [bx, gm, bt]
    em, ev = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    yield "batch_norm (eval)", lambda: _weighted(F.batch_norm(bx, gm, bt, em, ev, False), rb), [bx, gm, bt]
    dx = T(4, 6)
    rd = R((4, 6))
    yield "dropout (train)", lambda: _weighted(F.dropout(dx, 0.5, np.random.default_rng(7), True), rd), [dx]


def op_oracle_checks(rng: np.random.Generator):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 4))
    yield Check("ops", "matmul vs triple loop", _rel(F.matmul(Tensor(a), Tensor(b)).data, oracles.matmul_loops(a, b)), 1e-12)
    rows = rng.standard_normal((6, 9)) * 3
    ref = np.array([oracles.softmax_naive(r) for r in rows])
    yield Check("ops", "softmax_rows vs fsum softmax", _rel(F.softmax_rows(Tensor(rows)).data, ref), 1e-12)
    big = rows * 300
    got = F.softmax_rows(Tensor(big)).data
    yield Check("ops", "softmax_rows large scores stay finite",
                float(np.max(np.abs(got.sum(axis=1) - 1.0))), 1e-12)
    x = rng.standard_normal((2, 4, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 3, 2))
    for mode in F.PAD_MODES:
        got = F.conv3d(Tensor(x), Tensor(w), (1, 2, 2), (1, 1, 1), mode).data
        ref = oracles.conv3d_loops(x, w, (1, 2, 2), (1, 1, 1), replicate_time=mode == "replicate_time")
        yield Check("ops", f"conv3d vs loops ({mode})", _rel(got, ref), 1e-12)
    w2 = rng.standard_normal((1, 3, 3, 3, 2))
    got = F.conv3d(Tensor(x), Tensor(w2), 1, (0, 1, 1)).data
    ref = np.stack([np.stack([oracles.conv2d_loops(x[n, t], w2[0], 1, 1) for t in range(4)]) for n in range(2)])
    yield Check("ops", "1xkxk conv3d = per-frame conv2d", _rel(got, ref), 1e-12)
    got = F.max_pool3d(Tensor(x), 3, 2, 1).data
    yield Check("ops", "max_pool3d vs loops", _rel(got, oracles.max_pool_loops(x, (3, 3, 3), (2, 2, 2), (1, 1, 1))), 0.0)


def suite_ops(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng([seed, 1])
    out = list(op_oracle_checks(rng))
    for name, f, params in op_grad_cases(rng):
        out.append(Check("ops", f"grad {name}", F.grad_check(f, params, eps=1e-5), GRAD_TOL))
    return out


# ---------------------------------------------------------------------------
# block
# ---------------------------------------------------------------------------


def random_block_params(cfg: NonLocalConfig, rng: np.random.Generator) -> NonLocalParams:
    """Fresh parameters with a non-trivial BN so the residual branch is visible."""
    p = NonLocalParams.init(cfg, rng)
    if p.bn_gamma is not None:
        p.bn_gamma.data = rng.uniform(0.5, 1.5, p.bn_gamma.shape)
        p.bn_beta.data = rng.standard_normal(p.bn_beta.shape) * 0.1
        p.bn_running_mean[...] = rng.standard_normal(p.bn_running_mean.shape) * 0.1
        p.bn_running_var[...] = rng.uniform(0.5, 2.0, p.bn_running_var.shape)
    else:
        p.W_z.data = rng.standard_normal(p.W_z.shape) * 0.3
    # keep embedded scores modest so the oracle's direct exp() is well conditioned
    for t in (p.W_theta, p.W_phi):
        if t is not None:
            t.data = t.data * 0.5
    return p


def _params_dict(p: NonLocalParams) -> dict:
    d = {k: v.data for k, v in p.named().items()}
    d.update({k: v.copy() for k, v in p.buffers().items()})
    return d


def block_combinations():
    return list(itertools.product(PairwiseKind, MaskMode, (1, 2)))


def block_oracle_case(kind, mask, sub, rng: np.random.Generator) -> float:
    """One random input: vectorised block vs loop oracle, BN in train and eval mode."""
    T = int(rng.integers(1, 4))
    H = int(rng.choice([2, 4, 6]))
    C = int(rng.integers(2, 9))
    B = int(rng.integers(1, 3))
    cfg = NonLocalConfig(kind, channels_in=C, mask=mask, subsample_spatial=sub,
                         bottleneck=int(rng.integers(1, C + 1)))
    p = random_block_params(cfg, rng)
    x = rng.standard_normal((B, T, H, H, C)) * 0.5
    worst = 0.0
    for training in (False, True):
        ref = oracles.block_loops(x, _params_dict(p), cfg, bn_training=training)
        with no_grad():
            got = block_forward(Tensor(x), p, cfg, training=training).data
        worst = max(worst, _rel(got, ref))
    return worst


def suite_block(seed: int = 0, inputs_per_combo: int = 10) -> list[Check]:
    rng = np.random.default_rng([seed, 2])
    out = []
    for kind, mask, sub in block_combinations():
        name = f"block oracle {kind.value}/{mask.value}/sub{sub}"
        t0 = time.perf_counter()
        err = max(block_oracle_case(kind, mask, sub, rng) for _ in range(inputs_per_combo))
        out.append(Check("block", name, err, BLOCK_TOL, f"{inputs_per_combo} inputs", time.perf_counter() - t0))
    for kind in PairwiseKind:
        out.append(Check("block", f"grad block {kind.value}", block_grad_error(kind, rng), GRAD_TOL))
    out.append(Check("block", "self-attention equivalence", self_attention_error(rng), 1e-10))
    out.append(Check("block", "identity at init (max |z - x|)", block_identity_error(rng), 0.0))
    return out


def block_grad_error(kind, rng: np.random.Generator, mask=MaskMode.SPACETIME, sub: int = 2) -> float:
    cfg = NonLocalConfig(kind, channels_in=3, mask=mask, subsample_spatial=sub, bottleneck=2)
    p = random_block_params(cfg, rng)
    x = Tensor(rng.standard_normal((2, 2, 2, 2, 3)) * 0.5, requires_grad=True)
    r = rng.standard_normal(x.shape)
    params = [x] + list(p.named().values())
    if kind is PairwiseKind.CONCATENATION:
        # keep relu arguments away from the kink
        p.w_f.data = np.abs(p.w_f.data) + 0.2
        x.data = np.abs(x.data) + 0.1
        p.W_theta.data = np.abs(p.W_theta.data)
        p.W_phi.data = np.abs(p.W_phi.data)
    return F.grad_check(lambda: _weighted(block_forward(x, p, cfg, training=True), r), params, eps=1e-5)


def self_attention_error(rng: np.random.Generator) -> float:
    cfg = NonLocalConfig(PairwiseKind.EMBEDDED_GAUSSIAN, channels_in=6, bottleneck=3)
    p = NonLocalParams.init(cfg, rng)
    x = rng.standard_normal((2, 2, 3, 3, 6))
    from .nonlocal_block import nonlocal_forward
    with no_grad():
        got = nonlocal_forward(Tensor(x), p, cfg).data.reshape(2, 18, 3)
    ref = oracles.self_attention(x.reshape(2, 18, 6), p.W_theta.data, p.W_phi.data, p.W_g.data)
    return float(np.max(np.abs(got - ref)))


def block_identity_error(rng: np.random.Generator) -> float:
    worst = 0.0
    for kind, mask, sub in block_combinations():
        for use_bn in (True, False):
            cfg = NonLocalConfig(kind, channels_in=4, mask=mask, subsample_spatial=sub, use_bn_on_Wz=use_bn)
            p = NonLocalParams.init(cfg, rng)
            x = rng.standard_normal((2, 2, 4, 4, 4))
            for training in (True, False):
                with no_grad():
                    z = block_forward(Tensor(x), p, cfg, training=training).data
                worst = max(worst, float(np.max(np.abs(z - x))))
    return worst


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


def _logits(net, x) -> np.ndarray:
    net.eval()
    with no_grad():
        return net(Tensor(x)).data


def _randomize_bn(net, rng) -> None:
    from .nn import BatchNorm
    stack = [net]
    while stack:
        m = stack.pop()
        if isinstance(m, BatchNorm):
            m.gamma.data = rng.uniform(0.5, 1.5, m.gamma.shape)
            m.beta.data = rng.standard_normal(m.beta.shape) * 0.1
            m.running_mean[...] = rng.standard_normal(m.running_mean.shape) * 0.1
            m.running_var[...] = rng.uniform(0.5, 2.0, m.running_var.shape)
        stack.extend(c for _, c in m.children())


def network_identity_error(seed: int = 0) -> float:
    """Largest logit change from inserting fresh blocks, in eval and train mode."""
    rng = np.random.default_rng([seed, 3])
    base = build_network(desk_spec(), seed=seed)
    _randomize_bn(base, rng)
    x = rng.standard_normal((2,) + base.spec.input_shape + (1,))
    ref = _logits(base, x)
    worst = 0.0
    cfg = NonLocalConfig("embedded_gaussian")
    variants = [insert_nonlocal(base, pol, cfg) for pol in ("one", "five", "ten")]
    variants.append(insert_nonlocal(base, "five", NonLocalConfig("concatenation", mask="space_only")))
    variants.append(insert_residual_control(base, "five", cfg))
    for net in variants:
        worst = max(worst, float(np.max(np.abs(_logits(net, x) - ref))))
    i3d = inflate(base, "3x3x3")
    ref3 = _logits(i3d, x)
    worst = max(worst, float(np.max(np.abs(_logits(insert_nonlocal(i3d, "five", cfg), x) - ref3))))
    # train-mode BN sees the same batch statistics, so equality holds there too
    nl = insert_nonlocal(base, "five", cfg)
    for net in (base, nl):
        net.train()
        net.dropout.p = 0.0
    with no_grad():
        a, b = base(Tensor(x)).data, nl(Tensor(x)).data
    return max(worst, float(np.max(np.abs(a - b))))


def inflation_errors(seed: int = 0) -> tuple[float, float, float]:
    """(static-clip logit error, kernel plane-sum error, interior frame error under zero padding)."""
    rng = np.random.default_rng([seed, 4])
    spec = desk_spec(temporal_pad="replicate_time")
    c2d = build_network(spec, seed=seed)
    _randomize_bn(c2d, rng)
    frame = rng.standard_normal((2, 1) + spec.input_shape[1:] + (1,))
    static = np.repeat(frame, spec.input_shape[0], axis=1)
    ref = _logits(c2d, static)
    plane = 0.0
    logit_err = 0.0
    for variant in (Inflation.I3D_3X3X3, Inflation.I3D_3X1X1):
        i3d = inflate(c2d, variant)
        logit_err = max(logit_err, float(np.max(np.abs(_logits(i3d, static) - ref))))
        for (n2, p2), (n3, p3) in zip(c2d.named_parameters(), i3d.named_parameters()):
            if p3.data.ndim == 5 and p3.data.shape[0] > 1:
                exact = np.vectorize(lambda *v: math.fsum(v))(*p3.data)
                plane = max(plane, float(np.max(np.abs(exact - p2.data[0]))))
    # zero temporal padding: frames far from the clip borders still agree
    c2d0 = build_network(desk_spec(), seed=seed)
    _randomize_bn(c2d0, rng)
    i3d0 = inflate(c2d0, "3x3x3")
    x = np.repeat(rng.standard_normal((1, 1, 32, 32, 1)), 64, axis=1)
    with no_grad():
        c2d0.eval(), i3d0.eval()
        a = c2d0.features(Tensor(x)).data
        b = i3d0.features(Tensor(x)).data
    T = a.shape[1]
    interior = float(np.max(np.abs(a[:, T // 2] - b[:, T // 2])))
    return logit_err, plane, interior


def cost_checks() -> list[Check]:
    out = []
    for kind in PairwiseKind:
        c1 = count_block_cost(NonLocalConfig(kind, channels_in=64, subsample_spatial=1), 4, 14, 14)
        c2 = count_block_cost(NonLocalConfig(kind, channels_in=64, subsample_spatial=2), 4, 14, 14)
        ok = 4 * c2.macs_of("pairwise") == c1.macs_of("pairwise")
        out.append(Check("backbone", f"subsample 2 cuts pairwise MACs 4x ({kind.value})", 0.0 if ok else 1.0, 0.0))
    full = count_block_cost(NonLocalConfig("embedded_gaussian", channels_in=64, bottleneck=64), 4, 14, 14)
    half = count_block_cost(NonLocalConfig("embedded_gaussian", channels_in=64), 4, 14, 14)
    ok = 2 * half.macs_of("embedding") == full.macs_of("embedding")
    out.append(Check("backbone", "bottleneck C/2 halves embedding MACs", 0.0 if ok else 1.0, 0.0))
    base = build_network(desk_spec(), seed=0, allocate=False)
    c = count_network_cost(base)
    nl = count_network_cost(insert_nonlocal(base, "five", NonLocalConfig("embedded_gaussian")))
    i3 = count_network_cost(inflate(base, "3x3x3"))
    r_nl, r_i3 = nl.ratios(c)[1], i3.ratios(c)[1]
    out.append(Check("backbone", "desk MAC ratio NL-C2D < I3D 3x3x3", 0.0 if r_nl < r_i3 else 1.0, 0.0,
                     f"{float(r_nl):.3f} vs {float(r_i3):.3f}"))
    return out


def suite_backbone(seed: int = 0) -> list[Check]:
    out = [Check("backbone", "identity at init (network logits)", network_identity_error(seed), 0.0)]
    logit_err, plane, interior = inflation_errors(seed)
    out.append(Check("backbone", "inflation: static clip logits I3D vs C2D", logit_err, 1e-6))
    out.append(Check("backbone", "inflation: kernel planes sum to 2-D kernel", plane, 0.0))
    out.append(Check("backbone", "inflation: interior frame (zero padding)", interior, 1e-6))
    out.extend(cost_checks())
    gaps = policy_gaps("five", desk_spec())
    out.append(Check("backbone", "policy 'five' places 5 blocks", float(abs(len(gaps) - 5)), 0.0))
    return out


def run_suites(scope: str = "all", seed: int = 0, inputs_per_combo: int = 10) -> list[Check]:
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    out: list[Check] = []
    if scope in ("ops", "all"):
        out += suite_ops(seed)
    if scope in ("block", "all"):
        out += suite_block(seed, inputs_per_combo)
    if scope in ("backbone", "all"):
        out += suite_backbone(seed)
    return out


def to_csv(checks: list[Check]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["suite", "check", "error", "tol", "passed"])
    for c in checks:
        w.writerow([c.suite, c.name, f"{c.error:.17g}", f"{c.tol:.17g}", int(c.passed)])
    return buf.getvalue()


def report(checks: list[Check]) -> str:
    lines = [c.line() for c in checks]
    failed = [c for c in checks if not c.passed]
    lines.append(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if failed:
        lines.append("failed: " + ", ".join(c.name for c in failed))
    return "\n".join(lines)
