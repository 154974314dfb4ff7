"""SGD training with a step schedule, and multi-clip evaluation."""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensor as F
from ..errors import ConfigError, NumericError
from ..nn import Dropout, Module
from ..tensor import Tensor, no_grad
from .data import Dataset

LOG_HEADER = ("iter", "lr", "loss", "train_top1", "val_top1")


class TrainingDiverged(NumericError):
    def __init__(self, iteration: int, message: str, log: "list | None" = None):
        super().__init__(f"training diverged at iteration {iteration}: {message}")
        self.iteration = iteration
        self.log = log or []


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 5000
    decay_marks: tuple[int, ...] = (3000, 4500)
    decay_factor: float = 0.1
    batch_size: int = 8
    dropout: float = 0.5
    bn_mode: str = "train"  # or "frozen"
    seed: int = 0
    eval_every: int = 500
    val_clips: int = 1
    eval_batch: int = 32

    def __post_init__(self):
        object.__setattr__(self, "decay_marks", tuple(int(m) for m in self.decay_marks))
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if list(self.decay_marks) != sorted(self.decay_marks):
            raise ConfigError(f"decay marks must be ascending, got {self.decay_marks}")
        if self.batch_size < 1 or self.eval_every < 1 or self.val_clips < 1:
            raise ConfigError("batch_size, eval_every and val_clips must be >= 1")
        if self.bn_mode not in ("train", "frozen"):
            raise ConfigError(f"bn_mode must be 'train' or 'frozen', got {self.bn_mode!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr and weight_decay must be >= 0, momentum in [0, 1)")

    def lr_at(self, i: int) -> float:
        passed = sum(1 for m in self.decay_marks if i >= m)
        return self.lr * self.decay_factor ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_marks"] = list(self.decay_marks)
        return d


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- mu v + (g + wd p)``; ``p <- p - lr v``.
    """

    def __init__(self, params: list[Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            d = g + self.weight_decay * p.data
            v *= self.momentum
            v += d
            p.data = p.data - lr * v
            if not np.all(np.isfinite(p.data)):
                raise NumericError("parameter update produced non-finite values")


@dataclass
class TrainResult:
    net: Module
    log: list[dict] = field(default_factory=list)
    train_top1: float = float("nan")
    val_top1: float = float("nan")

    def log_csv(self) -> str:
        return log_to_csv(self.log)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def log_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in LOG_HEADER])
    return buf.getvalue()


def _fit(x: np.ndarray, shape: tuple, rng: np.random.Generator | None) -> np.ndarray:
    """Crop ``x[B,T,H,W,C]`` spatially to ``shape`` (random with ``rng``, else centred)."""
    _, H, W = shape
    dh, dw = x.shape[2] - H, x.shape[3] - W
    if dh < 0 or dw < 0:
        raise ConfigError(f"clips {x.shape[2:4]} are smaller than the network input {(H, W)}")
    if dh == 0 and dw == 0:
        return x
    oy = int(rng.integers(dh + 1)) if rng is not None else dh // 2
    ox = int(rng.integers(dw + 1)) if rng is not None else dw // 2
    return x[:, :, oy:oy + H, ox:ox + W]


def _input_shape(net: Module, x: np.ndarray) -> tuple:
    spec = getattr(net, "spec", None)
    return spec.input_shape if spec is not None else x.shape[1:4]


def _set_bn(net: Module, mode: str) -> None:
    if hasattr(net, "set_bn_frozen"):
        net.set_bn_frozen(mode == "frozen")


def train(net: Module, data: Dataset, cfg: TrainConfig, val: Dataset | None = None) -> TrainResult:
    """Train a copy of ``net``; the input network is left untouched.

    One log row per iteration holds the learning rate, the mini-batch loss and
    the mini-batch top-1. Validation top-1 is filled in before iteration 0,
    every ``eval_every`` iterations and on a final row ``iter = iterations``.
    """
    num_classes = getattr(getattr(net, "spec", None), "num_classes", None)
    if num_classes is not None and num_classes != data.num_classes:
        raise ConfigError(f"network predicts {num_classes} classes but the data has {data.num_classes}")
    net = copy.deepcopy(net)
    for m in _modules(net):
        if isinstance(m, Dropout):
            m.p = cfg.dropout
            m.reseed(cfg.seed)
    _set_bn(net, cfg.bn_mode)
    params = net.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 0xBA7C])
    crop_rng = np.random.default_rng([cfg.seed, 0xC40])
    n = len(data)
    perm, cursor = order_rng.permutation(n), 0
    log: list[dict] = []
    res = TrainResult(net, log)

    for i in range(cfg.iterations + 1):
        val_top1 = None
        if val is not None and (i % cfg.eval_every == 0 or i == cfg.iterations):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    val_top1 = evaluate(net, val, cfg.val_clips, batch_size=cfg.eval_batch)["top1"]
            except NumericError as e:
                log.append({"iter": i, "lr": cfg.lr_at(i), "loss": float("nan")})
                raise TrainingDiverged(i, f"validation: {e}", log) from None
        if i == cfg.iterations:
            log.append({"iter": i, "lr": cfg.lr_at(i), "val_top1": val_top1})
            break
        idx = []
        while len(idx) < cfg.batch_size:
            take = min(cfg.batch_size - len(idx), n - cursor)
            idx.extend(perm[cursor:cursor + take])
            cursor += take
            if cursor == n:
                perm, cursor = order_rng.permutation(n), 0
        x, y = data.batch(idx)
        x = _fit(x, _input_shape(net, x), crop_rng)
        lr = cfg.lr_at(i)
        net.train()
        net.zero_grad()
        try:
            # overflow surfaces as NumericError from the next op; numpy's warnings add nothing
            with np.errstate(over="ignore", invalid="ignore"):
                logits = net(Tensor(x))
                loss = F.cross_entropy(logits, y)
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite loss")
                loss.backward()
                opt.step(lr)
        except NumericError as e:
            log.append({"iter": i, "lr": lr, "loss": float("nan"), "val_top1": val_top1})
            raise TrainingDiverged(i, str(e), log) from None
        top1 = float(np.mean(np.argmax(logits.data, axis=1) == y))
        log.append({"iter": i, "lr": lr, "loss": float(loss.data), "train_top1": top1, "val_top1": val_top1})

    net.eval()
    if val is not None:
        res.val_top1 = log[-1]["val_top1"]
    probe = _Subset(data, min(len(data), len(val) if val is not None else 512))
    res.train_top1 = evaluate(net, probe, 1, batch_size=cfg.eval_batch)["top1"]
    return res


class _Subset(Dataset):
    def __init__(self, base: Dataset, n: int):
        self.base, self.n, self.num_classes = base, n, base.num_classes

    def __len__(self):
        return self.n

    def item(self, i):
        return self.base.item(i)

    def batch(self, indices):
        return self.base.batch(indices)


def _modules(m: Module):
    yield m
    for _, c in m.children():
        yield from _modules(c)


def clip_starts(length: int, clip_len: int, clips: int) -> list[int]:
    """``clips`` evenly spaced window starts covering ``[0, length - clip_len]``."""
    if clips < 1:
        raise ConfigError("clips_per_item must be >= 1")
    if clip_len > length:
        raise ConfigError(f"clip length {clip_len} exceeds item length {length}")
    if clips == 1:
        return [(length - clip_len) // 2]
    return [int(round(v)) for v in np.linspace(0, length - clip_len, clips)]


def predict_views(net: Module, views: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax scores ``[V, K]`` for a stack of clips (eval mode, no tape)."""
    net.eval()
    out = []
    with no_grad():
        for s in range(0, len(views), batch_size):
            logits = net(Tensor(views[s:s + batch_size])).data
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def evaluate(net: Module, data: Dataset, clips_per_item: int = 1, clip_len: int | None = None,
             batch_size: int = 32) -> dict:
    """Top-1 of the per-item mean softmax over ``clips_per_item`` temporal windows."""
    if clips_per_item < 1:
        raise ConfigError("clips_per_item must be >= 1")
    n = len(data)
    probs, labels = [], []
    items_per_batch = max(1, batch_size // clips_per_item)
    for s in range(0, n, items_per_batch):
        x, y = data.batch(range(s, min(n, s + items_per_batch)))
        T = x.shape[1]
        L = clip_len or getattr(getattr(net, "spec", None), "input_shape", (T,))[0]
        L = min(L, T) if clip_len is None else L
        starts = clip_starts(T, L, clips_per_item)
        views = np.stack([x[:, t:t + L] for t in starts], axis=1)  # [b, V, L, H, W, C]
        b, V = views.shape[:2]
        flat = _fit(views.reshape((b * V,) + views.shape[2:]), _input_shape(net, views[0]), None)
        p = predict_views(net, flat, batch_size).reshape(b, V, -1)
        probs.append(p.mean(axis=1))
        labels.append(y)
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    pred = np.argmax(probs, axis=1)
    return {"top1": float(np.mean(pred == labels)), "n": n, "probs": probs, "labels": labels}
