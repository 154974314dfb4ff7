"""Network checkpoints in the :mod:`nlnet.container` format."""

from __future__ import annotations

import numpy as np

from . import container
from .backbones import Network, NetworkSpec
from .errors import ConfigError
from .nn import Module

FORMAT = "nlnet-checkpoint"


def state_arrays(net: Module) -> dict[str, np.ndarray]:
    """Parameters as ``param/<name>`` and buffers as ``buffer/<name>``."""
    out = {f"param/{n}": p.data for n, p in net.named_parameters()}
    out.update({f"buffer/{n}": b for n, b in net.named_buffers()})
    return out


def load_state(net: Module, arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``net``; names and shapes must match exactly."""
    targets = {f"param/{n}": p for n, p in net.named_parameters()}
    buffers = {f"buffer/{n}": b for n, b in net.named_buffers()}
    expected = set(targets) | set(buffers)
    missing, extra = sorted(expected - set(arrays)), sorted(set(arrays) - expected)
    if missing or extra:
        raise ConfigError(f"checkpoint does not fit network: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, a in arrays.items():
        cur = targets[name].data if name in targets else buffers[name]
        if cur.shape != a.shape:
            raise ConfigError(f"{name}: checkpoint shape {a.shape} != network shape {cur.shape}")
    for name, p in targets.items():
        p.data = np.array(arrays[name], dtype=np.float64)
        p.grad = None
    for name, b in buffers.items():
        b[...] = arrays[name]


def save_checkpoint(net: Network, path, meta: dict | None = None):
    manifest = {"format": FORMAT, "spec": net.spec.to_dict(), "seed": net.seed, "meta": meta or {}}
    return container.write(path, manifest, state_arrays(net))


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild the network from the stored spec and fill in its weights."""
    manifest, arrays = container.read(path)
    if manifest.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a network checkpoint (format={manifest.get('format')!r})")
    net = Network(NetworkSpec.from_dict(manifest["spec"]), seed=manifest["seed"])
    load_state(net, arrays)
    net.eval()
    return net, manifest.get("meta", {})


def block_names(path) -> list[str]:
    """Non-local block names recorded in a checkpoint's manifest."""
    manifest, _ = container.read(path)
    names = set()
    for e in manifest.get("entries", []):
        parts = e["name"].split("/", 1)[1].split(".")
        if len(parts) > 2 and parts[1].startswith("nl"):
            names.add(".".join(parts[:2]))
    return sorted(names)
