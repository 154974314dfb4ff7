"""Experiment configuration files.

Grammar, one entry per line::

    # comment
    key: type = value          # trailing comment
    sweep.key: list[type] = v1, v2, v3

``type`` is one of ``int``, ``float``, ``str``, ``bool``, ``list[int]``,
``list[float]``, ``list[str]`` and must match the key's declared type.
Strings may be quoted. Lists are comma separated, optionally in brackets.
Keys not in :data:`SCHEMA` are rejected with their line number.

``sweep.<key>`` lines turn a config into an ablation matrix: the cartesian
product of all sweep values (in file order) becomes one run per combination.
Every run shares the base seed unless ``seed`` itself is swept.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbones import (Inflation, Network, build_network, count_network_cost, desk_spec, inflate, insert_nonlocal,
                        insert_residual_control, resnet50_spec)
from .errors import ConfigError, ShapeError
from .harness.data import SyntheticTask
from .harness.train import TrainConfig
from .nonlocal_block import NonLocalConfig

_TYPES = ("int", "float", "str", "bool", "list[int]", "list[float]", "list[str]")

# key -> (type, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "out": ("str", "runs"),
    "network.preset": ("str", "desk"),
    "network.inflation": ("str", "none"),
    "network.temporal_pad": ("str", "zero"),
    "network.width_scale": ("float", 1.0),
    "network.depth_scale": ("float", 1.0),
    "nonlocal.policy": ("str", "none"),
    "nonlocal.kind": ("str", "embedded_gaussian"),
    "nonlocal.mask": ("str", "spacetime"),
    "nonlocal.subsample": ("int", 1),
    "nonlocal.bottleneck": ("int", 0),
    "nonlocal.use_bn": ("bool", True),
    "nonlocal.control": ("bool", False),
    "task.kind": ("str", "delayed_match"),
    "task.frames": ("int", 8),
    "task.height": ("int", 32),
    "task.width": ("int", 32),
    "task.channels": ("int", 1),
    "task.classes": ("int", 2),
    "task.noise": ("float", 0.1),
    "task.identities": ("int", 4),
    "task.canvas_pad": ("int", 0),
    "task.train_size": ("int", 20000),
    "task.val_size": ("int", 400),
    "train.lr": ("float", 0.01),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 1e-4),
    "train.iterations": ("int", 5000),
    "train.decay_marks": ("list[int]", [3000, 4500]),
    "train.batch_size": ("int", 8),
    "train.dropout": ("float", 0.5),
    "train.bn_mode": ("str", "train"),
    "train.eval_every": ("int", 500),
    "train.val_clips": ("int", 1),
    "eval.clips": ("int", 1),
    "visualize.block": ("str", ""),
    "visualize.item": ("int", 0),
    "visualize.topk": ("int", 20),
    "bench.passes": ("int", 20),
    "bench.batch": ("int", 1),
}

_LINE = re.compile(r"^(?P<key>[A-Za-z_][\w.]*)\s*:\s*(?P<type>[\w\[\]]+)\s*=\s*(?P<value>.*)$")


def _strip_comment(line: str) -> str:
    out, quote = [], None
    for ch in line:
        if quote:
            quote = None if ch == quote else quote
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def _scalar(text: str, typ: str, where: str):
    text = text.strip()
    if typ == "str":
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
            return text[1:-1]
        return text
    if typ == "bool":
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{where}: expected a bool, got {text!r}")
    try:
        return int(text) if typ == "int" else float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {typ}, got {text!r}") from None


def _value(text: str, typ: str, where: str):
    if not typ.startswith("list["):
        return _scalar(text, typ, where)
    inner = typ[5:-1]
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    if not text.strip():
        return []
    return [_scalar(v, inner, where) for v in text.split(",")]


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})
    sweeps: dict = field(default_factory=dict)  # key -> list of values
    source: str = "<config>"
    text: str = ""
    name: str = ""
    lines: dict = field(default_factory=dict)  # key -> line number that set it

    def __getitem__(self, key):
        return self.values[key]

    # -- derived objects --------------------------------------------------
    def task(self) -> SyntheticTask:
        v = self.values
        return SyntheticTask(v["task.kind"], (v["task.frames"], v["task.height"], v["task.width"], v["task.channels"]),
                             v["task.classes"], v["task.noise"], v["seed"], v["task.identities"],
                             canvas_pad=v["task.canvas_pad"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr=v["train.lr"], momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
                           iterations=v["train.iterations"], decay_marks=tuple(v["train.decay_marks"]),
                           batch_size=v["train.batch_size"], dropout=v["train.dropout"], bn_mode=v["train.bn_mode"],
                           seed=v["seed"], eval_every=v["train.eval_every"], val_clips=v["train.val_clips"])

    def nonlocal_config(self) -> NonLocalConfig:
        v = self.values
        return NonLocalConfig(v["nonlocal.kind"], mask=v["nonlocal.mask"], subsample_spatial=v["nonlocal.subsample"],
                              bottleneck=v["nonlocal.bottleneck"] or None, use_bn_on_Wz=v["nonlocal.use_bn"])

    def policy(self):
        """Named policy, or explicit ``stage:gap`` placements separated by spaces."""
        p = self.values["nonlocal.policy"]
        if ":" not in p:
            return p
        out = []
        for item in p.split():
            stage, _, gap = item.partition(":")
            try:
                out.append((stage, int(gap)))
            except ValueError:
                raise ConfigError(f"bad placement {item!r}; expected stage:gap") from None
        return out

    def base_spec(self):
        v = self.values
        presets = {"desk": desk_spec, "resnet50": resnet50_spec}
        if v["network.preset"] not in presets:
            raise ConfigError(f"network.preset must be one of {sorted(presets)}, got {v['network.preset']!r}")
        return presets[v["network.preset"]](
            in_channels=v["task.channels"], num_classes=v["task.classes"],
            input_shape=(v["task.frames"], v["task.height"], v["task.width"]),
            temporal_pad=v["network.temporal_pad"], dropout=v["train.dropout"])

    def build_base(self, allocate: bool = True) -> Network:
        v = self.values
        return build_network(self.base_spec(), v["network.width_scale"], v["network.depth_scale"],
                             seed=v["seed"], allocate=allocate)

    def build(self, allocate: bool = True) -> Network:
        """The configured model: optional inflation, then non-local or control insertions."""
        v = self.values
        net = self.build_base(allocate)
        if Inflation.parse(v["network.inflation"]) is not Inflation.NONE:
            net = inflate(net, v["network.inflation"])
        if v["nonlocal.policy"] != "none":
            ins = insert_residual_control if v["nonlocal.control"] else insert_nonlocal
            net = ins(net, self.policy(), self.nonlocal_config())
        return net

    def validate(self) -> None:
        """Build every derived object once (without weights) so errors surface early.

        Errors name the section and the lines that set its keys.
        """
        v = self.values
        for key in ("task.train_size", "task.val_size", "bench.passes", "bench.batch", "eval.clips", "visualize.topk"):
            if v[key] < 1:
                raise ConfigError(f"{self._where(key)}{key} must be >= 1")
        steps = [("task", self.task), ("train", self.train_config), ("nonlocal", self.nonlocal_config),
                 ("network", lambda: count_network_cost(self.build(allocate=False)))]
        for section, fn in steps:
            try:
                fn()
            except (ConfigError, ShapeError, ValueError) as e:
                raise ConfigError(f"{self._where(section)}[{section}] {e}") from None

    def _where(self, prefix: str) -> str:
        lines = sorted(n for k, n in self.lines.items() if k == prefix or k.startswith(prefix + "."))
        return f"line {', '.join(map(str, lines))}: " if lines else ""

    def expand(self) -> list["ExperimentConfig"]:
        """One config per combination of sweep values; a config without sweeps is its own matrix."""
        if not self.sweeps:
            return [self]
        keys = list(self.sweeps)
        out = []
        for combo in itertools.product(*(self.sweeps[k] for k in keys)):
            vals = dict(self.values)
            vals.update(zip(keys, combo))
            name = "_".join(f"{k.split('.')[-1]}={_slug(c)}" for k, c in zip(keys, combo))
            out.append(replace(self, values=vals, sweeps={}, name=name))
        return out

    def dump(self) -> str:
        lines = []
        for k, (typ, _) in SCHEMA.items():
            lines.append(f"{k}: {typ} = {_render(self.values[k], typ)}")
        for k, vals in self.sweeps.items():
            lines.append(f"sweep.{k}: list[{SCHEMA[k][0]}] = {_render(vals, 'list[' + SCHEMA[k][0] + ']')}")
        return "\n".join(lines) + "\n"


def _slug(v) -> str:
    return re.sub(r"[^\w.-]", "-", str(v).lower())


def _render(v, typ: str) -> str:
    if typ.startswith("list["):
        return ", ".join(_render(x, typ[5:-1]) for x in v)
    if typ == "bool":
        return "true" if v else "false"
    if typ == "float":
        return repr(float(v))
    return str(v)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig(source=source, text=text)
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if not line:
            continue
        where = f"{source}:{lineno}"
        m = _LINE.match(line)
        if not m:
            raise ConfigError(f"{where}: expected 'key: type = value', got {raw.strip()!r}")
        key, typ, value = m.group("key"), m.group("type"), m.group("value")
        if typ not in _TYPES:
            raise ConfigError(f"{where}: unknown type {typ!r}; expected one of {', '.join(_TYPES)}")
        if key in seen:
            raise ConfigError(f"{where}: {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        cfg.lines[key[len("sweep."):] if key.startswith("sweep.") else key] = lineno
        sweep = key.startswith("sweep.")
        base = key[len("sweep."):] if sweep else key
        if base not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        want = SCHEMA[base][0]
        if sweep:
            if typ != f"list[{want}]":
                raise ConfigError(f"{where}: {key} must be declared as list[{want}], not {typ}")
            vals = _value(value, typ, where)
            if not vals:
                raise ConfigError(f"{where}: {key} needs at least one value")
            if base in ("out",):
                raise ConfigError(f"{where}: {base!r} cannot be swept")
            cfg.sweeps[base] = vals
        else:
            if typ != want:
                raise ConfigError(f"{where}: {key} is {want}, not {typ}")
            cfg.values[key] = _value(value, typ, where)
    for run in cfg.expand():
        try:
            run.validate()
        except ConfigError as e:
            label = f" (run {run.name})" if run.name else ""
            raise ConfigError(f"{source}{label}: {e}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))
