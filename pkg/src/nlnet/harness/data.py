"""Synthetic clips whose label needs both ends of the clip.

``delayed_match``: an early sprite appears only in the first frames and a
late sprite only in the last quarter; the label says whether they are the
same identity. ``direction_of_travel``: one sprite is visible early and late
at two places and invisible in between; the label is the octant (or
quadrant) of its displacement. Middle frames hold noise only, so no window
shorter than half the clip carries label information.

Every item is generated from its own RNG stream ``[seed, split, index]``,
which makes items independent of the dataset size and the train and
validation splits disjoint by construction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import container
from ..errors import ConfigError, ShapeError

SPLITS = {"train": 0, "val": 1, "test": 2}


class TaskKind(str, enum.Enum):
    DELAYED_MATCH = "delayed_match"
    DIRECTION_OF_TRAVEL = "direction_of_travel"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("-", "_")
        aliases = {"delayedmatch": "delayed_match", "directionoftravel": "direction_of_travel"}
        try:
            return cls(aliases.get(v, v))
        except ValueError:
            raise ConfigError(f"unknown task {value!r}; expected delayed_match or direction_of_travel") from None


@dataclass(frozen=True)
class SyntheticTask:
    kind: TaskKind = TaskKind.DELAYED_MATCH
    shape: tuple[int, int, int, int] = (8, 32, 32, 1)  # T, H, W, C
    num_classes: int = 2
    noise: float = 0.1
    seed: int = 0
    identities: int = 4  # delayed_match sprite vocabulary
    sprite: int = 0  # sprite side; 0 picks max(3, min(H, W) // 6)
    canvas_pad: int = 0  # extra border for random-crop jitter

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind.parse(self.kind))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.shape) != 4:
            raise ConfigError(f"task shape must be (T, H, W, C), got {self.shape}")
        T, H, W, C = self.shape
        if not 1 <= C <= 3:
            raise ConfigError(f"clips have 1-3 channels, got {C}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.kind is TaskKind.DELAYED_MATCH and self.num_classes != 2:
            raise ConfigError("delayed_match is a two-class task")
        if self.kind is TaskKind.DIRECTION_OF_TRAVEL and self.num_classes not in (4, 8):
            raise ConfigError("direction_of_travel has 4 or 8 classes")
        if self.identities < 2:
            raise ConfigError("need at least two sprite identities")
        if T < 4:
            raise ShapeError(f"clip too short to separate early and late frames: T={T}")
        s = self.sprite_size
        if min(H, W) < 2 * s:
            raise ShapeError(f"frame {H}x{W} too small to place {s}x{s} sprites")

    @property
    def sprite_size(self) -> int:
        T, H, W, _ = self.shape
        return self.sprite or max(3, min(H, W) // 6)

    @property
    def canvas(self) -> tuple[int, int, int, int]:
        T, H, W, C = self.shape
        return T, H + 2 * self.canvas_pad, W + 2 * self.canvas_pad, C

    @property
    def early_frames(self) -> int:
        return max(1, self.shape[0] // 8)

    @property
    def late_frames(self) -> int:
        return max(1, self.shape[0] // 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        return cls(**d)


def sprite_bank(task: SyntheticTask) -> np.ndarray:
    """``[K, s, s, C]`` distinct sprites, fixed by the task seed."""
    s, C = task.sprite_size, task.shape[3]
    rng = np.random.default_rng([task.seed, 0x5B])
    bank: list[np.ndarray] = []
    while len(bank) < task.identities:
        pat = (rng.random((s, s)) < 0.5).astype(np.float64)
        # reject near-duplicates and near-empty patterns
        if pat.sum() < s * s // 4 or any(np.abs(pat - b[..., 0]).sum() < s * s // 4 for b in bank):
            continue
        color = rng.uniform(0.6, 1.0, size=C)
        bank.append(pat[..., None] * color)
    return np.stack(bank)


def _paste(clip, frames, y, x, sprite):
    s = sprite.shape[0]
    clip[frames, y:y + s, x:x + s, :] += sprite


def make_item(task: SyntheticTask, split: str, index: int, bank: np.ndarray | None = None):
    """One ``(clip[T,H,W,C], label)`` pair; label is ``index % num_classes``."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    bank = sprite_bank(task) if bank is None else bank
    T, H, W, C = task.canvas
    s = task.sprite_size
    rng = np.random.default_rng([task.seed, SPLITS[split], int(index)])
    label = int(index) % task.num_classes
    clip = task.noise * rng.standard_normal((T, H, W, C)) if task.noise else np.zeros((T, H, W, C))
    early = slice(0, task.early_frames)
    late = slice(T - task.late_frames, T)
    if task.kind is TaskKind.DELAYED_MATCH:
        K = len(bank)
        a = int(rng.integers(K))
        b = a if label == 1 else int((a + 1 + rng.integers(K - 1)) % K)
        ya, xa = rng.integers(0, H - s + 1), rng.integers(0, W - s + 1)
        yb, xb = rng.integers(0, H - s + 1), rng.integers(0, W - s + 1)
        _paste(clip, early, ya, xa, bank[a])
        _paste(clip, late, yb, xb, bank[b])
    else:
        sector = 2 * math.pi / task.num_classes
        pat = bank[int(rng.integers(len(bank)))]
        lo = max(2.0, s / 2)
        hi = max(lo + 1, min(H, W) - s)
        while True:
            ang = (label + rng.uniform(0.1, 0.9)) * sector
            r = rng.uniform(lo, hi)
            dy, dx = -r * math.sin(ang), r * math.cos(ang)  # image rows grow downward
            y0 = rng.uniform(max(0, -dy), min(H - s, H - s - dy)) if abs(dy) <= H - s else None
            x0 = rng.uniform(max(0, -dx), min(W - s, W - s - dx)) if abs(dx) <= W - s else None
            if y0 is None or x0 is None:
                continue
            y1, x1 = int(round(y0 + dy)), int(round(x0 + dx))
            y0, x0 = int(round(y0)), int(round(x0))
            if 0 <= y1 <= H - s and 0 <= x1 <= W - s and _octant(y1 - y0, x1 - x0, task.num_classes) == label:
                break
        _paste(clip, early, y0, x0, pat)
        _paste(clip, late, y1, x1, pat)
    return clip, label


def _octant(dy: float, dx: float, classes: int) -> int:
    ang = math.atan2(-dy, dx) % (2 * math.pi)
    return int(ang // (2 * math.pi / classes)) % classes


class Dataset:
    """Indexable ``(clips, labels)``; subclasses decide how items are produced."""

    num_classes: int

    def __len__(self) -> int:
        raise NotImplementedError

    def item(self, i: int):
        raise NotImplementedError

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = zip(*(self.item(int(i)) for i in indices))
        return np.stack(xs), np.asarray(ys, dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([self.item(i)[1] for i in range(len(self))], dtype=np.int64)


class ArrayDataset(Dataset):
    def __init__(self, x: np.ndarray, y: np.ndarray, num_classes: int | None = None):
        if len(x) != len(y):
            raise ShapeError(f"{len(x)} clips but {len(y)} labels")
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.num_classes = int(num_classes if num_classes is not None else self.y.max() + 1)

    def __len__(self):
        return len(self.y)

    def item(self, i):
        return self.x[i], int(self.y[i])

    def batch(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return self.x[idx], self.y[idx]

    @property
    def labels(self):
        return self.y


class SyntheticDataset(Dataset):
    """Lazily generated items; ``materialize`` turns it into an :class:`ArrayDataset`."""

    def __init__(self, task: SyntheticTask, n: int, split: str = "train"):
        if n < 1:
            raise ConfigError("dataset size must be >= 1")
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        self.task, self.n, self.split = task, int(n), split
        self.num_classes = task.num_classes
        self._bank = sprite_bank(task)

    def __len__(self):
        return self.n

    def item(self, i):
        if not 0 <= i < self.n:
            raise IndexError(i)
        return make_item(self.task, self.split, i, self._bank)

    @property
    def labels(self):
        return np.arange(self.n, dtype=np.int64) % self.num_classes

    def materialize(self) -> ArrayDataset:
        x, y = self.batch(range(self.n))
        return ArrayDataset(x, y, self.num_classes)


def generate(task: SyntheticTask, n: int, split: str = "train") -> SyntheticDataset:
    return SyntheticDataset(task, n, split)


def save_dataset(ds: Dataset, path, task: SyntheticTask | None = None, split: str = ""):
    x, y = ds.batch(range(len(ds)))
    manifest = {"format": "nlnet-dataset", "num_classes": ds.num_classes, "split": split,
                "task": task.to_dict() if task is not None else None}
    return container.write(path, manifest, {"clips": x, "labels": y})


def load_dataset(path) -> ArrayDataset:
    manifest, arrays = container.read(path)
    if manifest.get("format") != "nlnet-dataset":
        raise ConfigError(f"{path}: not a dataset cache")
    return ArrayDataset(arrays["clips"], arrays["labels"], manifest["num_classes"])
