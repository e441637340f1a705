"""Desk-scale DDF network and a plain SGD training loop with hand-derived gradients."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import (
    BottleneckParams,
    NormParams,
    bottleneck_backward,
    bottleneck_forward,
    max_abs_filter,
    norm_backward,
    norm_forward,
)
from .filters import _as_rng, _uniform
from .optim import sgd_momentum_step
from .tensor.geometry import ConvWeights, KernelGeometry
from .tensor.grad import conv2d_backward, fully_connected_backward, global_avg_pool_backward
from .tensor.ops import conv2d, fully_connected, global_avg_pool


@dataclass
class StageSpec:
    width: int
    blocks: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stage stride must be 1 or 2, got {self.stride}")
        if self.width < 4:
            raise ValueError(f"stage width must be >= 4, got {self.width}")
        if self.blocks < 1:
            raise ValueError("a stage needs at least one block")


@dataclass
class ToyNetSpec:
    stages: list = field(default_factory=lambda: [StageSpec(8, 1, 1), StageSpec(16, 1, 2)])
    input_shape: tuple = (1, 16, 16)
    num_classes: int = 2
    seed: int = 0
    k: int = 3
    sigma: float = 0.2

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        self.input_shape = tuple(self.input_shape)

    @classmethod
    def from_json(cls, path) -> "ToyNetSpec":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict) or "stages" not in data:
            raise ValueError("toy net spec must be a JSON object with a 'stages' list")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToyNetParams:
    stem: ConvWeights
    stem_norm: NormParams
    blocks: list
    head_weight: np.ndarray
    head_bias: np.ndarray


def build_toy_net(spec: ToyNetSpec, dtype=np.float64) -> ToyNetParams:
    rng = _as_rng(spec.seed)
    c_in = spec.input_shape[0]
    w0 = spec.stages[0].width
    stem = ConvWeights(_uniform(rng, (w0, c_in, 3, 3), c_in * 9, dtype))
    blocks, c = [], w0
    for stage in spec.stages:
        for i in range(stage.blocks):
            stride = stage.stride if i == 0 else 1
            mid = max(2, stage.width // 2)
            blocks.append(BottleneckParams.init(c, mid, stage.width, stride, spec.k, spec.sigma, rng, dtype))
            c = stage.width
    head_w = _uniform(rng, (spec.num_classes, c), c, dtype)
    head_b = _uniform(rng, (spec.num_classes,), c, dtype)
    return ToyNetParams(stem, NormParams.identity(w0, dtype), blocks, head_w, head_b)


_STEM = KernelGeometry(3)


def toy_forward(x, params: ToyNetParams, training=True, use_fn=True, update_stats=False):
    s = conv2d(x, params.stem, _STEM)
    n, c_norm = norm_forward(s, params.stem_norm, training, update_stats)
    h = np.maximum(n, 0)
    caches = []
    for bp in params.blocks:
        h, c = bottleneck_forward(h, bp, training, use_fn, update_stats)
        caches.append(c)
    pooled = global_avg_pool(h)
    logits = fully_connected(pooled, params.head_weight, params.head_bias)
    return logits, (x, n, c_norm, caches, h.shape, pooled)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(len(labels)), labels] -= 1
    return float(loss), grad / len(labels)


def toy_backward(grad_logits, params: ToyNetParams, cache) -> ToyNetParams:
    x, n, c_norm, caches, h_shape, pooled = cache
    d_pooled, d_hw, d_hb = fully_connected_backward(pooled, params.head_weight, params.head_bias, grad_logits)
    g = global_avg_pool_backward(h_shape, d_pooled)
    d_blocks = [None] * len(params.blocks)
    for i in range(len(params.blocks) - 1, -1, -1):
        g, d_blocks[i] = bottleneck_backward(g, params.blocks[i], caches[i])
    g = g * (n > 0)
    g, d_norm = norm_backward(g, params.stem_norm, c_norm)
    _, d_stem = conv2d_backward(x, params.stem, _STEM, g)
    return ToyNetParams(d_stem, d_norm, d_blocks, d_hw, d_hb)


def toy_loss_and_grads(x, labels, params: ToyNetParams, use_fn=True):
    logits, cache = toy_forward(x, params, True, use_fn)
    loss, g = softmax_cross_entropy(logits, labels)
    return loss, toy_backward(g, params, cache)


def make_bars(n: int = 500, size: int = 16, seed: int = 0, noise: float = 0.3, dtype=np.float64):
    """Two-class bar orientation images: label 0 horizontal, 1 vertical."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, noise, size=(n, 1, size, size))
    y = rng.integers(0, 2, size=n)
    for i in range(n):
        pos = rng.integers(2, size - 3)
        length = rng.integers(size // 2, size + 1)
        start = rng.integers(0, size - length + 1)
        if y[i] == 0:
            x[i, 0, pos : pos + 2, start : start + length] += 1.0
        else:
            x[i, 0, start : start + length, pos : pos + 2] += 1.0
    return x.astype(dtype), y


TASKS = {"bars": make_bars}


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    max_abs_filter: list = field(default_factory=list)
    diverged: bool = False

    def append(self, epoch, loss, mx):
        self.epochs.append(epoch)
        self.loss.append(loss)
        self.max_abs_filter.append(mx)

    def to_csv(self) -> str:
        lines = ["epoch,loss,max_abs_filter"]
        lines += [f"{e},{l!r},{m!r}" for e, l, m in zip(self.epochs, self.loss, self.max_abs_filter)]
        return "\n".join(lines) + "\n"


def _block_filter_max(caches) -> float:
    return max(max_abs_filter(c[5]) for c in caches)


DEFAULT_LR = 0.05
DEFAULT_BATCH = 25


def toy_train(
    spec: ToyNetSpec,
    task: str = "bars",
    epochs: int = 30,
    lr: float = DEFAULT_LR,
    use_fn: bool = True,
    batch_size: int = DEFAULT_BATCH,
    samples: int = 500,
    momentum: float = 0.9,
    params: Optional[ToyNetParams] = None,
    dtype=np.float64,
) -> TrainLog:
    """SGD with momentum; row 0 of the log is the untrained network.

    Batches are a fixed seeded partition, so with ``lr = 0`` every epoch
    sees bit-identical batches and losses.  A non-finite loss stops the run
    and sets ``diverged``.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    x, y = TASKS[task](samples, spec.input_shape[-1], spec.seed, dtype=dtype)
    order = np.random.default_rng(spec.seed + 1).permutation(len(y))
    batches = [order[i : i + batch_size] for i in range(0, len(y), batch_size)]
    params = params if params is not None else build_toy_net(spec, dtype)
    log = TrainLog()

    losses, mx = [], 0.0
    for idx in batches:
        logits, cache = toy_forward(x[idx], params, True, use_fn)
        losses.append(softmax_cross_entropy(logits, y[idx])[0])
        mx = max(mx, _block_filter_max(cache[3]))
    log.append(0, float(np.mean(losses)), mx)

    velocity: dict = {}
    for epoch in range(1, epochs + 1):
        losses, mx = [], 0.0
        with np.errstate(all="ignore"):
            for idx in batches:
                logits, cache = toy_forward(x[idx], params, True, use_fn, update_stats=True)
                loss, g = softmax_cross_entropy(logits, y[idx])
                mx = max(mx, _block_filter_max(cache[3]))
                if not math.isfinite(loss):
                    log.append(epoch, loss, mx)
                    log.diverged = True
                    return log
                grads = toy_backward(g, params, cache)
                sgd_momentum_step(params, grads, velocity, lr, momentum)
                losses.append(loss)
        log.append(epoch, float(np.mean(losses)), mx)
    return log
