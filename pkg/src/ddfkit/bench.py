"""Microbenchmark harness: latency, peak transient memory and analytical FLOPs per operator.

Protocol, per operator:

1. inputs and filters are generated outside every timed region;
2. ``warmup`` untimed calls, then ``iters`` timed calls with
   :func:`time.perf_counter`; the report keeps the median and the
   interquartile range;
3. one extra call under :func:`ddfkit.memtrack.track_allocations` gives the
   peak transient bytes (peak growth minus what survives the call, i.e. the
   output), so memory is measured apart from the timed loop.

``ddf_fused`` times the operator itself with the spatial and channel
filters already generated.  ``dense_dynamic`` materializes one filter per
pixel and is skipped with a notice above the oracle element cap; its
memory row then carries the analytical extrapolation instead.
"""
from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .complexity import LayerSpec, layer_cost
from .ddf import (
    DEFAULT_ELEMENT_CAP,
    dense_dynamic_forward,
    ddf_forward_fused,
    ddf_forward_naive,
    factorized_dense_filters,
)
from .memtrack import track_allocations
from .tensor.geometry import ConvWeights, KernelGeometry
from .tensor.ops import conv2d, depthwise_conv2d
from .upsample import DdfUpParams, ddf_up

OPERATORS = ("conv", "dwconv", "ddf_fused", "ddf_naive", "dense_dynamic", "ddf_up")
REFERENCE_SHAPE = (2, 256, 200, 300)
NAIVE_CAP = 2**21  # scalar-loop iterations b*c*n*k^2 allowed for ddf_naive


@dataclass
class BenchConfig:
    shape: tuple = REFERENCE_SHAPE
    k: int = 3
    operators: tuple = ("conv", "dwconv", "ddf_fused", "dense_dynamic")
    warmup: int = 1
    iters: int = 5
    threads: int = 1
    dtype: str = "f64"
    seed: int = 0
    element_cap: int = DEFAULT_ELEMENT_CAP

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.operators = tuple(self.operators)
        if len(self.shape) != 4 or min(self.shape) < 1:
            raise ValueError(f"shape must be four positive ints (b, c, h, w), got {self.shape}")
        if self.iters < 1 or self.warmup < 0:
            raise ValueError("need iters >= 1 and warmup >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        bad = [o for o in self.operators if o not in OPERATORS]
        if bad:
            raise ValueError(f"unknown operators {bad}; choose from {', '.join(OPERATORS)}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class OperatorResult:
    operator: str
    median_s: Optional[float] = None
    iqr_s: Optional[float] = None
    peak_transient_bytes: Optional[int] = None
    flops: Optional[float] = None
    skipped: bool = False
    notice: str = ""
    times_s: list = field(default_factory=list)


@dataclass
class BenchReport:
    config: dict
    environment: dict
    results: list
    memory_check: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def by_operator(self) -> dict:
        return {r.operator: r for r in self.results}

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "environment": self.environment,
            "results": [asdict(r) for r in self.results],
            "memory_check": self.memory_check,
            "checks": self.checks,
        }

    def render(self, fmt: str = "table") -> str:
        if fmt == "json":
            return json.dumps(self.to_dict(), indent=2) + "\n"
        if fmt == "csv":
            lines = ["operator,median_s,iqr_s,peak_transient_bytes,flops,skipped"]
            for r in self.results:
                vals = [r.median_s, r.iqr_s, r.peak_transient_bytes, r.flops]
                lines.append(",".join([r.operator] + ["" if v is None else repr(v) for v in vals] + [str(r.skipped).lower()]))
            return "\n".join(lines) + "\n"
        if fmt != "table":
            raise ValueError(f"unknown format {fmt!r}; expected table, json or csv")
        c = self.config
        head = (
            f"# shape {'x'.join(map(str, c['shape']))}  k={c['k']}  dtype={c['dtype']}  "
            f"threads={self.environment['threads']}  warmup={c['warmup']}  iters={c['iters']}  "
            f"(median / IQR of wall time; peak = transient bytes of one separate tracked call)"
        )
        cols = f"{'operator':<15}{'median (ms)':>13}{'IQR (ms)':>11}{'peak (MB)':>12}{'GFLOPs':>10}"
        lines = [head, cols, "-" * len(cols)]
        for r in self.results:
            med = "-" if r.median_s is None else f"{r.median_s * 1e3:.1f}"
            iqr = "-" if r.iqr_s is None else f"{r.iqr_s * 1e3:.1f}"
            peak = "-" if r.peak_transient_bytes is None else f"{r.peak_transient_bytes / 2**20:.1f}"
            fl = "-" if r.flops is None else f"{r.flops / 1e9:.2f}"
            lines.append(f"{r.operator:<15}{med:>13}{iqr:>11}{peak:>12}{fl:>10}" + (f"  [{r.notice}]" if r.notice else ""))
        m = self.memory_check
        if m:
            lines.append(
                f"# allocation hook at {'x'.join(map(str, m['shape']))}: ddf_fused {m['ddf_fused_bytes']} B, "
                f"dwconv {m['dwconv_bytes']} B, dense oracle {m['dense_dynamic_bytes']} B "
                f"(product filter {m['product_filter_bytes']} B, DDF filters {m['ddf_filter_bytes']} B)"
            )
        return "\n".join(lines) + "\n"


def dense_extrapolated_bytes(shape: tuple, k: int, itemsize: int) -> int:
    """Bytes of a full per-pixel ``c x c x k x k`` dynamic filter bank, ``b n c^2 k^2``."""
    b, c, h, w = shape
    return b * h * w * c * c * k * k * itemsize


def _flops(op: str, shape: tuple, k: int) -> float:
    b, c, h, w = shape
    kind = {"conv": "conv", "dwconv": "dwconv", "ddf_fused": "ddf", "ddf_naive": "ddf",
            "dense_dynamic": "dense_dynamic", "ddf_up": "ddf_up"}[op]
    spec = LayerSpec(kind, c, c, k=k, x=2 if op == "ddf_up" else None)
    return b * layer_cost(spec, h, w).flops


def _prepare(op: str, cfg: BenchConfig, rng: np.random.Generator) -> tuple[Optional[Callable], str]:
    """Returns ``(thunk, notice)``; a None thunk means the operator is skipped."""
    b, c, h, w = cfg.shape
    k, dt = cfg.k, cfg.np_dtype
    geom = KernelGeometry(k)
    x = rng.standard_normal(cfg.shape).astype(dt)
    sp = rng.standard_normal((b, h * w, k, k)).astype(dt)
    ch = rng.standard_normal((b, c, k, k)).astype(dt)
    if op == "conv":
        wts = ConvWeights(rng.standard_normal((c, c, k, k)).astype(dt) / np.sqrt(c * k * k))
        return (lambda: conv2d(x, wts, geom)), ""
    if op == "dwconv":
        wt = rng.standard_normal((c, k, k)).astype(dt)
        return (lambda: depthwise_conv2d(x, wt, geom)), ""
    if op == "ddf_fused":
        return (lambda: ddf_forward_fused(x, sp, ch, geom)), ""
    if op == "ddf_naive":
        work = b * c * h * w * k * k
        if work > NAIVE_CAP:
            return None, f"skipped: scalar oracle needs {work} iterations, cap {NAIVE_CAP}"
        return (lambda: ddf_forward_naive(x, sp, ch, geom)), ""
    if op == "dense_dynamic":
        n_el = b * h * w * c * k * k
        if n_el > cfg.element_cap:
            return None, f"skipped: oracle scale only ({n_el} filter elements > cap {cfg.element_cap})"
        dense = factorized_dense_filters(sp, ch)
        return (lambda: dense_dynamic_forward(x, dense, geom, cfg.element_cap)), ""
    if op == "ddf_up":
        params = DdfUpParams.init(c, 2, k, 0.2, "self", seed=rng, dtype=dt)
        return (lambda: ddf_up(x, None, params)), ""
    raise ValueError(op)  # pragma: no cover


def measure(thunk: Callable, warmup: int, iters: int) -> tuple[list, int]:
    for _ in range(warmup):
        thunk()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        thunk()
        times.append(time.perf_counter() - t0)
    with track_allocations() as rec:
        out = thunk()
    del out
    return times, rec.transient_bytes


def run_bench(cfg: BenchConfig, log: Optional[Callable[[str], None]] = None) -> BenchReport:
    rng = np.random.default_rng(cfg.seed)
    results = []
    itemsize = np.dtype(cfg.np_dtype).itemsize
    with threadpool_limits(limits=cfg.threads):
        for op in cfg.operators:
            thunk, notice = _prepare(op, cfg, rng)
            res = OperatorResult(op, flops=_flops(op, cfg.shape, cfg.k), notice=notice)
            if thunk is None:
                res.skipped = True
                if op == "dense_dynamic":
                    res.peak_transient_bytes = dense_extrapolated_bytes(cfg.shape, cfg.k, itemsize)
                    res.notice += "; peak is the analytical b*n*c^2*k^2 extrapolation"
                if log:
                    log(f"{op}: {res.notice}")
            else:
                times, peak = measure(thunk, cfg.warmup, cfg.iters)
                q1, q3 = np.percentile(times, [25, 75])
                res.times_s = times
                res.median_s = statistics.median(times)
                res.iqr_s = float(q3 - q1)
                res.peak_transient_bytes = int(peak)
            del thunk
            results.append(res)
    env = {"threads": cfg.threads, "dtype": cfg.dtype, "numpy": np.__version__, "python": platform.python_version()}
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
    return BenchReport(config, env, results)


def capped_memory_check(shape: tuple = (1, 16, 32, 32), k: int = 3, dtype=np.float64) -> dict:
    """Allocation-hook evidence at a shape small enough to run the dense oracle.

    Reports the transient peaks of the fused DDF, the depth-wise conv and the
    dense per-pixel oracle next to the element counts they are expected to
    scale with: ``(n + c) k^2`` for DDF filters, ``n c k^2`` for any path that
    forms the product filter.
    """
    b, c, h, w = shape
    rng = np.random.default_rng(0)
    geom = KernelGeometry(k)
    x = rng.standard_normal(shape).astype(dtype)
    sp = rng.standard_normal((b, h * w, k, k)).astype(dtype)
    ch = rng.standard_normal((b, c, k, k)).astype(dtype)
    wt = rng.standard_normal((c, k, k)).astype(dtype)
    itemsize = np.dtype(dtype).itemsize

    with track_allocations() as r_ddf:
        out = ddf_forward_fused(x, sp, ch, geom)
    del out
    with track_allocations() as r_dw:
        out = depthwise_conv2d(x, wt, geom)
    del out
    with track_allocations() as r_dense:
        out = dense_dynamic_forward(x, factorized_dense_filters(sp, ch), geom)
    del out
    n = h * w
    return {
        "shape": list(shape),
        "k": k,
        "ddf_fused_bytes": r_ddf.transient_bytes,
        "dwconv_bytes": r_dw.transient_bytes,
        "dense_dynamic_bytes": r_dense.transient_bytes,
        "ddf_filter_bytes": b * (n + c) * k * k * itemsize,
        "product_filter_bytes": b * n * c * k * k * itemsize,
        "dense_full_bytes": dense_extrapolated_bytes(shape, k, itemsize),
    }


def ordering_checks(report: BenchReport) -> dict:
    """Cross-operator properties; absolute timings are never judged.

    * ``ddf_faster_than_conv``: median latency of the fused DDF below conv;
    * ``ddf_memory_near_dwconv``: fused DDF transient peak within 2x dwconv;
    * ``ddf_memory_below_dense``: at least 100x below the ``b n c^2 k^2``
      filter bank a dense per-pixel dynamic filter must hold;
    * ``hook_sees_no_product_filter``: at the capped shape the fused path
      stays under the ``n c k^2`` product-filter size that the dense oracle
      exceeds.
    """
    r = report.by_operator()
    out = {}
    ddf, conv, dw, dense = r.get("ddf_fused"), r.get("conv"), r.get("dwconv"), r.get("dense_dynamic")
    if ddf and conv and ddf.median_s is not None and conv.median_s is not None:
        out["ddf_faster_than_conv"] = ddf.median_s < conv.median_s
    if ddf and dw and ddf.peak_transient_bytes is not None and dw.peak_transient_bytes is not None:
        out["ddf_memory_near_dwconv"] = ddf.peak_transient_bytes <= 2 * max(dw.peak_transient_bytes, 1)
    if ddf and ddf.peak_transient_bytes is not None:
        c = report.config
        itemsize = 4 if c["dtype"] == "f32" else 8
        dense_bytes = dense_extrapolated_bytes(tuple(c["shape"]), c["k"], itemsize)
        out["ddf_memory_below_dense"] = 100 * max(ddf.peak_transient_bytes, 1) <= dense_bytes
    m = report.memory_check
    if m:
        out["hook_sees_no_product_filter"] = (
            m["ddf_fused_bytes"] < m["product_filter_bytes"] <= m["dense_dynamic_bytes"]
        )
    return out
