"""Analytical parameter / FLOP / filter-space counts per layer and per network.

``flops`` are raw floating-point operations (one multiply-add = 2).  The
``macs`` property halves them; that is the convention the published
ResNet tables use (ResNet50 ~ 4.1B).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..filters import squeeze_dim

KINDS = ("conv", "dwconv", "pointwise", "fc", "ddf", "ddf_up", "dense_dynamic", "pool", "add", "norm")


class TopologyError(ValueError):
    """Descriptor layers do not chain consistently."""


@dataclass
class LayerSpec:
    kind: str
    c_in: int = 0
    c_out: int = 0
    k: int = 1
    stride: int = 1
    sigma: Optional[float] = None
    x: Optional[int] = None
    bias: bool = False
    global_pool: bool = False
    guide: str = "self"
    src: str = "main"
    block_start: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.c_out == 0:
            self.c_out = self.c_in
        if self.kind in ("ddf", "ddf_up"):
            if self.sigma is None:
                self.sigma = 0.2
            if not 0 < self.sigma <= 1:
                raise ValueError(f"sigma must lie in (0, 1], got {self.sigma}")
        if self.kind == "ddf_up" and (self.x is None or self.x < 2):
            raise ValueError("ddf_up layers need an integer scale x >= 2")
        if self.kind in ("dwconv", "ddf", "ddf_up", "dense_dynamic", "norm", "add", "pool") and self.c_in != self.c_out:
            raise ValueError(f"{self.kind} layers keep the channel count (c_in={self.c_in}, c_out={self.c_out})")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if "c" in d:
            c = d.pop("c")
            d.setdefault("c_in", c)
            d.setdefault("c_out", c)
        return cls(**d)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        if self.kind == "pool" and self.global_pool:
            return 1, 1
        if self.kind == "ddf_up":
            return h * self.x, w * self.x
        if self.kind == "fc":
            return 1, 1
        return (h - 1) // self.stride + 1, (w - 1) // self.stride + 1


@dataclass
class LayerCost:
    name: str
    kind: str
    h_in: int
    w_in: int
    params: int
    flops: float
    filter_space: int
    params_continuous: float
    flops_continuous: float

    @property
    def macs(self) -> float:
        return self.flops / 2


@dataclass
class CostReport:
    name: str = ""
    params: int = 0
    flops: float = 0
    filter_space: int = 0
    params_continuous: float = 0
    flops_continuous: float = 0
    layers: list = field(default_factory=list)

    @property
    def macs(self) -> float:
        return self.flops / 2

    @property
    def macs_continuous(self) -> float:
        return self.flops_continuous / 2

    def add(self, lc: LayerCost) -> None:
        self.layers.append(lc)
        self.params += lc.params
        self.flops += lc.flops
        self.filter_space += lc.filter_space
        self.params_continuous += lc.params_continuous
        self.flops_continuous += lc.flops_continuous

    def totals(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "params_continuous": self.params_continuous,
            "flops": self.flops,
            "macs": self.macs,
            "flops_continuous": self.flops_continuous,
            "macs_continuous": self.macs_continuous,
            "filter_space": self.filter_space,
        }


def _ddf_terms(n: int, c: int, k: int, sigma: float):
    k2 = k * k
    ds = squeeze_dim(c, sigma)
    params = c * k2 + ds * c + ds * c * k2
    params_cont = c * k2 + sigma * c * c * (1 + k2)
    flops = 5 * n * c * k2 + 2 * ds * c * (1 + k2)
    flops_cont = 5 * n * c * k2 + 2 * sigma * c * c * (1 + k2)
    return params, params_cont, flops, flops_cont, (n + c) * k2


def layer_cost(spec: LayerSpec, h: Optional[int], w: Optional[int]) -> LayerCost:
    """Cost of one layer whose input resolution is ``h x w``."""
    if h is None or w is None:
        raise TopologyError(f"layer {spec.name or spec.kind}: input resolution unresolved")
    ho, wo = spec.out_size(h, w)
    n_out, n_in = ho * wo, h * w
    ci, co, k2 = spec.c_in, spec.c_out, spec.k * spec.k
    space = 0
    if spec.kind in ("conv", "pointwise"):
        kk = 1 if spec.kind == "pointwise" else k2
        params = ci * co * kk + (co if spec.bias else 0)
        flops = 2 * n_out * ci * co * kk
    elif spec.kind == "fc":
        params = ci * co + (co if spec.bias else 0)
        flops = 2 * ci * co
    elif spec.kind == "dwconv":
        params = ci * k2
        flops = 2 * n_out * ci * k2
    elif spec.kind == "ddf":
        params, pc, flops, fc, space = _ddf_terms(n_out, ci, spec.k, spec.sigma)
        return LayerCost(spec.name, spec.kind, h, w, params, flops, space, pc, fc)
    elif spec.kind == "ddf_up":
        x2 = spec.x * spec.x
        p1, pc1, f1, fc1, s1 = _ddf_terms(n_in, ci, spec.k, spec.sigma)
        extra_p = extra_f = 0
        if spec.guide == "self":
            extra_p, extra_f = ci * 9, 2 * n_in * ci * 9
        return LayerCost(
            spec.name, spec.kind, h, w,
            x2 * p1 + extra_p, x2 * f1 + extra_f, x2 * s1,
            x2 * pc1 + extra_p, x2 * fc1 + extra_f,
        )
    elif spec.kind == "dense_dynamic":
        params = ci**3 * k2
        flops = 2 * n_out * ci**3 * k2 + 2 * n_out * ci**2 * k2
        space = n_out * ci**2 * k2
    elif spec.kind == "pool":
        flops = n_in * ci if spec.global_pool else n_out * ci * k2
        params = 0
    elif spec.kind == "add":
        params, flops = 0, n_out * ci
    elif spec.kind == "norm":
        params, flops = 2 * ci, 2 * n_out * ci
    else:  # pragma: no cover - guarded by LayerSpec
        raise ValueError(spec.kind)
    return LayerCost(spec.name, spec.kind, h, w, params, flops, space, params, flops)


@dataclass
class NetworkDescriptor:
    name: str
    input: tuple
    layers: list

    def with_sigma(self, sigma: float) -> "NetworkDescriptor":
        layers = []
        for l in self.layers:
            if l.kind in ("ddf", "ddf_up"):
                l = LayerSpec(**{**asdict(l), "sigma": sigma})
            layers.append(l)
        return NetworkDescriptor(self.name, self.input, layers)


def network_cost(descr: NetworkDescriptor, input_shape: Optional[tuple] = None) -> CostReport:
    """Propagate resolution/channels through the layer list and sum layer costs.

    Layers tagged ``src="block_input"`` read the tensor saved by the most
    recent ``block_start`` layer (projection shortcuts); an ``add`` checks
    that both paths agree.
    """
    c, h, w = input_shape if input_shape is not None else descr.input
    report = CostReport(descr.name)
    block = None
    side = None
    for i, spec in enumerate(descr.layers):
        label = spec.name or f"{i}:{spec.kind}"
        if spec.block_start:
            block = (c, h, w)
            side = (c, h, w)
        if spec.src == "block_input":
            if side is None:
                raise TopologyError(f"{label}: shortcut layer outside a block")
            sc, sh, sw = side
            if spec.c_in != sc:
                raise TopologyError(f"{label}: expects {spec.c_in} channels, shortcut carries {sc}")
            lc = layer_cost(spec, sh, sw)
            lc.name = label
            report.add(lc)
            side = (spec.c_out, *spec.out_size(sh, sw))
            continue
        if spec.kind == "add":
            if side is None or side != (c, h, w):
                raise TopologyError(f"{label}: residual add of {(c, h, w)} with shortcut {side}")
        elif spec.c_in != c:
            raise TopologyError(f"{label}: expects {spec.c_in} input channels, got {c}")
        lc = layer_cost(spec, h, w)
        lc.name = label
        report.add(lc)
        h, w = spec.out_size(h, w)
        c = spec.c_out
        if spec.kind == "add":
            block = side = None
    return report


def cost_table(reports: list, fmt: str = "table") -> str:
    """Render reports side by side with a stable column order."""
    cols = ["name", "params", "params_continuous", "flops", "macs", "filter_space"]
    rows = [r.totals() for r in reports]
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow(r)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}; expected table, json or csv")
    header = f"{'network':<24}{'params (M)':>12}{'FLOPs (B, MAC)':>16}{'raw FLOPs (B)':>15}{'filter space':>15}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['name']:<24}{r['params'] / 1e6:>12.2f}{r['macs'] / 1e9:>16.3f}"
            f"{r['flops'] / 1e9:>15.3f}{r['filter_space']:>15d}"
        )
    return "\n".join(lines) + "\n"
