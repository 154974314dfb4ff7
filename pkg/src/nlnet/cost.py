"""Parameter and multiply-add accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    macs: int
    part: str = ""  # e.g. "conv", "bn", "pairwise", "aggregate"


@dataclass
class CostReport:
    """Per-layer costs for one input clip, plus optional ratios vs. a baseline."""

    layers: list[LayerCost] = field(default_factory=list)
    input_shape: tuple | None = None
    label: str = ""

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(c.macs for c in self.layers)

    def add(self, name: str, params: int, macs: int, part: str = "") -> None:
        self.layers.append(LayerCost(name, int(params), int(macs), part))

    def extend(self, other: "CostReport", prefix: str = "") -> None:
        for c in other.layers:
            self.layers.append(LayerCost(prefix + c.name, c.params, c.macs, c.part))

    def macs_of(self, part: str) -> int:
        return sum(c.macs for c in self.layers if c.part == part)

    def params_of(self, part: str) -> int:
        return sum(c.params for c in self.layers if c.part == part)

    def ratios(self, baseline: "CostReport") -> tuple[Fraction, Fraction]:
        """Exact (params, macs) ratios of this report over ``baseline``."""
        return (Fraction(self.total_params, baseline.total_params),
                Fraction(self.total_macs, baseline.total_macs))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "part", "params", "macs"])
        for c in self.layers:
            w.writerow([c.name, c.part, c.params, c.macs])
        w.writerow(["TOTAL", "", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_text(self, baseline: "CostReport | None" = None) -> str:
        lines = [f"{self.label or 'network'}: params={self.total_params:,} macs={self.total_macs:,}"]
        if baseline is not None:
            rp, rm = self.ratios(baseline)
            lines.append(f"  vs {baseline.label or 'baseline'}: params {float(rp):.3f}x, macs {float(rm):.3f}x")
        return "\n".join(lines)
