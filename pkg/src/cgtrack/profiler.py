"""Static parameter / MAC accounting.

Counts come from walking each module's declared layer graph with concrete
shapes (``Module.cost``), never from tracing a forward pass. Convolutions
and linear layers contribute MACs; attention contributes its QK^T and AV
products; normalization, activations, gates and resampling count 0.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .nn import Module


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[CostRow]
    params: int = field(init=False)
    macs: int = field(init=False)

    def __post_init__(self):
        self.params = sum(r.params for r in self.rows)
        self.macs = sum(r.macs for r in self.rows)

    def group(self, depth: int = 1) -> dict[str, tuple[int, int]]:
        """Totals per module-path prefix of the given depth, in row order."""
        out: dict[str, list[int]] = {}
        for r in self.rows:
            key = ".".join(r.name.split(".")[:depth])
            acc = out.setdefault(key, [0, 0])
            acc[0] += r.params
            acc[1] += r.macs
        return {k: (p, m) for k, (p, m) in out.items()}

    def select(self, prefix: str) -> "CostReport":
        return CostReport([r for r in self.rows if r.name == prefix or r.name.startswith(prefix + ".")])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.macs])
        for k, (p, m) in self.group().items():
            w.writerow([f"group:{k}", p, m])
        w.writerow(["total", self.params, self.macs])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def count_params(module: Module) -> int:
    return module.param_count()


def report(module: Module, shape=None, prefix: str = "") -> CostReport:
    """Walk ``module`` with input ``shape`` (full models supply their own default)."""
    if shape is None:
        _, rows = module.cost()
    else:
        _, rows = module.cost(shape, prefix)
    return CostReport([CostRow(*r) for r in rows])


def count_macs(module: Module, shape=None) -> int:
    if shape is None and not _has_default_shape(module):
        raise ValueError(f"{type(module).__name__} needs concrete input shapes for MAC counting")
    return report(module, shape).macs


def _has_default_shape(module: Module) -> bool:
    import inspect
    params = inspect.signature(module.cost).parameters
    first = next(iter(params.values()))
    return first.default is not inspect.Parameter.empty
