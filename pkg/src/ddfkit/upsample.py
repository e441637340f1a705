"""DDF-Up: x^2 parallel DDF branches whose outputs are pixel-shuffled to x-times resolution.

Branch ``s`` (``0 <= s < x^2``) writes the sub-grid at offset ``(s // x, s % x)``.
Its spatial filters come from guidance features and its channel filters
from the low-resolution input.  Guidance is either computed from the input
by a 3x3 depth-wise convolution (``mode="self"``) or supplied externally
(``mode="joint"``) at the input resolution, where every branch sees it
whole, or at the output resolution, where it is folded with
:func:`space_to_depth` and branch ``s`` reads channel slab ``s``.

Also here: a small joint depth upsampling network built from chained x2
DDF-Up modules, interpolation baselines, RMSE and a synthetic
edge-aligned depth/colour generator.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .blocks import DdfModuleParams, Pointwise, ddf_module_backward, ddf_module_forward
from .filters import FilterNormParams, SeedLike, _as_rng, _uniform
from .optim import Adam
from .tensor.io import load_params_into, read_manifest, save_params
from .tensor.geometry import ConvWeights, KernelGeometry, ShapeError, check_tensor
from .tensor.grad import conv2d_backward, depthwise_conv2d_backward, pointwise_conv_backward
from .tensor.ops import conv2d, depthwise_conv2d, pixel_shuffle, pointwise_conv, space_to_depth

GUIDE_GEOM = KernelGeometry(3)
MODES = ("self", "joint")


@dataclass
class DdfUpParams:
    scale: int
    branches: list
    mode: str = "self"
    guide_kernel: Optional[np.ndarray] = None  # (c, 3, 3), self mode only

    def __post_init__(self):
        if self.scale < 2:
            raise ValueError(f"scale must be >= 2, got {self.scale}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.branches) != self.scale**2:
            raise ValueError(f"need {self.scale ** 2} branches for scale {self.scale}, got {len(self.branches)}")
        ks = {b.geom.k for b in self.branches}
        cs = {b.channel.channels for b in self.branches}
        if len(ks) != 1 or len(cs) != 1:
            raise ShapeError("all DDF-Up branches must share k and channel count")
        if any(b.geom.stride != 1 for b in self.branches):
            raise ShapeError("DDF-Up branches run at stride 1")
        if self.mode == "self" and self.guide_kernel is None:
            raise ValueError("self-guided DDF-Up needs a depth-wise guidance kernel")

    @property
    def channels(self) -> int:
        return self.branches[0].channel.channels

    @property
    def k(self) -> int:
        return self.branches[0].geom.k

    @classmethod
    def init(
        cls,
        c: int,
        scale: int = 2,
        k: int = 3,
        sigma: float = 0.2,
        mode: str = "self",
        c_guide: Optional[int] = None,
        seed: SeedLike = 0,
        dtype=np.float64,
    ) -> "DdfUpParams":
        rng = _as_rng(seed)
        guide = None
        if mode == "self":
            guide = _uniform(rng, (c, 3, 3), 9, dtype)
            c_guide = None
        branches = [DdfModuleParams.init(c, k, sigma, rng, 1, c_guide, dtype) for _ in range(scale * scale)]
        return cls(scale, branches, mode, guide)


def _guidance_slices(x, guidance, params: DdfUpParams):
    """Per-branch guidance tensors at the input resolution, plus how they were made."""
    b, c, h, w = x.shape
    s = params.scale
    if params.mode == "self":
        if guidance is not None:
            raise ValueError("self-guided DDF-Up takes no external guidance")
        g = depthwise_conv2d(x, params.guide_kernel, GUIDE_GEOM)
        return [g] * (s * s), "self"
    if guidance is None:
        raise ValueError("joint DDF-Up requires a guidance tensor")
    check_tensor(guidance, "guidance")
    if guidance.shape[0] != b:
        raise ShapeError(f"guidance batch {guidance.shape[0]} != input batch {b}")
    gh, gw = guidance.shape[2:]
    if (gh, gw) == (h, w):
        return [guidance] * (s * s), "low"
    if (gh, gw) == (h * s, w * s):
        cg = guidance.shape[1]
        folded = space_to_depth(guidance, s)
        return [folded[:, i * cg : (i + 1) * cg] for i in range(s * s)], "high"
    raise ShapeError(f"guidance resolution {gh}x{gw} is neither {h}x{w} nor {h * s}x{w * s}")


def ddf_up_forward(x: np.ndarray, guidance: Optional[np.ndarray], params: DdfUpParams):
    """Returns ``(out, cache)`` with ``out`` of shape ``(b, c, x*h, x*w)``."""
    check_tensor(x)
    if x.shape[1] != params.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, module expects {params.channels}")
    slices, how = _guidance_slices(x, guidance, params)
    outs, caches = [], []
    for br, g in zip(params.branches, slices):
        o, c = ddf_module_forward(x, br, guidance=g)
        outs.append(o)
        caches.append(c)
    out = pixel_shuffle(np.concatenate(outs, axis=1), params.scale)
    return out, (x, guidance, how, caches)


def ddf_up(x: np.ndarray, guidance: Optional[np.ndarray], params: DdfUpParams) -> np.ndarray:
    return ddf_up_forward(x, guidance, params)[0]


def ddf_up_backward(grad: np.ndarray, params: DdfUpParams, cache):
    """Returns ``(d_input, d_params, d_guidance)``; ``d_guidance`` is None in self mode."""
    x, guidance, how, caches = cache
    c = params.channels
    folded = space_to_depth(grad, params.scale)
    dx = np.zeros_like(x, dtype=grad.dtype)
    d_branches, d_slices = [], []
    for i, (br, bc) in enumerate(zip(params.branches, caches)):
        dxi, dpi, dgi = ddf_module_backward(folded[:, i * c : (i + 1) * c], br, bc)
        dx += dxi
        d_branches.append(dpi)
        d_slices.append(dgi)
    d_kernel = dg = None
    if how == "self":
        d_guide = sum(d_slices[1:], d_slices[0])
        dxg, d_kernel = depthwise_conv2d_backward(x, params.guide_kernel, GUIDE_GEOM, d_guide)
        dx += dxg
    elif how == "low":
        dg = sum(d_slices[1:], d_slices[0])
    else:
        dg = pixel_shuffle(np.concatenate(d_slices, axis=1), params.scale)
    return dx, DdfUpParams(params.scale, d_branches, params.mode, d_kernel), dg


def identity_branch_params(c: int, scale: int = 2, dtype=np.float64) -> DdfUpParams:
    """Self-guided DDF-Up whose every branch copies its input, so the module is nearest upsampling.

    Uses 1x1 filters: the normalized filter of a single tap is exactly ``beta``,
    so ``beta = 1`` on both branches gives a unit product filter with no
    rounding anywhere.
    """
    branches = []
    for _ in range(scale * scale):
        p = DdfModuleParams.init(c, 1, 1.0, 0, dtype=dtype)
        p.fn_spatial.beta[...] = 1.0
        p.fn_channel.beta[...] = 1.0
        branches.append(p)
    return DdfUpParams(scale, branches, "self", np.zeros((c, 3, 3), dtype))


# -- baselines and metric ---------------------------------------------------------


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    d = pred.astype(np.float64) - gt.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def interp_matrix(n_in: int, scale: int, method: str) -> np.ndarray:
    """``(scale*n_in, n_in)`` resampling matrix, half-pixel centres, replicated borders."""
    n_out = n_in * scale
    m = np.zeros((n_out, n_in))
    i = np.arange(n_out)
    if method == "nearest":
        m[i, i // scale] = 1.0
        return m
    u = (i + 0.5) / scale - 0.5
    base = np.floor(u).astype(int)
    frac = u - base
    if method == "bilinear":
        taps = {0: 1 - frac, 1: frac}
    elif method == "bicubic":
        taps = {d: _cubic(frac - d) for d in (-1, 0, 1, 2)}
    else:
        raise ValueError(f"unknown method {method!r}; expected nearest, bilinear or bicubic")
    for d, wgt in taps.items():
        np.add.at(m, (i, np.clip(base + d, 0, n_in - 1)), wgt)
    return m


def baseline_upsample(x: np.ndarray, scale: int, method: str = "bicubic") -> np.ndarray:
    """Separable nearest / bilinear / bicubic (Keys, a = -0.5) upsampling of a ``(b, c, h, w)`` tensor."""
    check_tensor(x)
    if scale < 2:
        raise ValueError(f"scale must be >= 2, got {scale}")
    mh = interp_matrix(x.shape[2], scale, method)
    mw = interp_matrix(x.shape[3], scale, method)
    out = np.einsum("ih,bchw,jw->bcij", mh, x.astype(np.float64), mw, optimize=True)
    return out.astype(x.dtype)


# -- synthetic joint upsampling data ------------------------------------------------


def make_depth_pairs(n: int, size: int = 32, seed: int = 0, shapes: int = 6, dtype=np.float64):
    """Piecewise-constant depth maps and colour guidance that share every edge.

    Each sample paints random half-planes, rectangles and discs over a
    background.  Every region gets an independent depth in ``[0, 1]`` and an
    independent RGB colour, so colour edges mark depth edges but colour
    values carry no depth information.  Returns ``(depth (n,1,s,s), rgb (n,3,s,s))``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    depth = np.empty((n, 1, size, size))
    rgb = np.empty((n, 3, size, size))
    for i in range(n):
        d = np.full((size, size), rng.uniform())
        col = np.empty((3, size, size))
        col[:] = rng.uniform(size=3)[:, None, None]
        for _ in range(shapes):
            kind = rng.integers(3)
            if kind == 0:
                theta = rng.uniform(0, 2 * np.pi)
                off = rng.uniform(0.25, 0.75) * size
                mask = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta) > off - size / 2
            elif kind == 1:
                y0, x0 = rng.uniform(0, size * 0.8, size=2)
                hh, ww = rng.uniform(size * 0.15, size * 0.5, size=2)
                mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
            else:
                cy, cx = rng.uniform(0, size, size=2)
                r = rng.uniform(size * 0.1, size * 0.3)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            d[mask] = rng.uniform()
            col[:, mask] = rng.uniform(size=3)[:, None]
        depth[i, 0] = d
        rgb[i] = col
    return depth.astype(dtype), rgb.astype(dtype)


def downsample_nearest(depth: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour decimation that samples the centre pixel of each block."""
    if depth.shape[2] % factor or depth.shape[3] % factor:
        raise ShapeError(f"spatial dims {depth.shape[2:]} not divisible by {factor}")
    o = factor // 2
    return np.ascontiguousarray(depth[:, :, o::factor, o::factor])


# -- joint depth upsampling network ------------------------------------------------

_ENC = KernelGeometry(3)


@dataclass
class JointUpsamplerSpec:
    factor: int = 4
    in_width: int = 8
    guide_width: int = 8
    seed: int = 0
    k: int = 3
    sigma: float = 0.25
    in_channels: int = 1
    guide_channels: int = 3
    residual: str = "bicubic"

    def __post_init__(self):
        if self.factor not in (4, 8, 16):
            raise ValueError(f"factor must be 4, 8 or 16, got {self.factor}")
        if self.residual not in ("none", "nearest", "bilinear", "bicubic"):
            raise ValueError(f"unknown residual {self.residual!r}")
        if self.residual != "none" and self.in_channels != 1:
            raise ValueError("an interpolation residual needs a single input channel")
        if self.in_width < 1 or self.guide_width < 1:
            raise ValueError("encoder widths must be positive")

    @property
    def stages(self) -> int:
        return int(round(math.log2(self.factor)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class JointUpsamplerParams:
    in_conv1: ConvWeights
    in_conv2: ConvWeights
    guide_conv1: ConvWeights
    guide_conv2: ConvWeights
    ups: list = field(default_factory=list)
    head: Optional[Pointwise] = None


def _conv_init(rng, c_out, c_in, dtype) -> ConvWeights:
    fan = c_in * 9
    return ConvWeights(_uniform(rng, (c_out, c_in, 3, 3), fan, dtype), _uniform(rng, (c_out,), fan, dtype))


def _guide_grid(x: np.ndarray, step: int) -> np.ndarray:
    """Centre sample of every ``step x step`` block (the grid a module writes to)."""
    if step == 1:
        return x
    return np.ascontiguousarray(x[:, :, step // 2 :: step, step // 2 :: step])


def _box_fn(branch: DdfModuleParams) -> None:
    # FN output has zero mean and unit std, so these affine terms start every
    # branch near a 3x3 box filter: spatial ~ 1/9 + N/9, channel ~ 1 + N/2
    branch.fn_spatial = FilterNormParams(np.full_like(branch.fn_spatial.alpha, 1 / 9),
                                         np.full_like(branch.fn_spatial.beta, 1 / 9))
    branch.fn_channel = FilterNormParams(np.full_like(branch.fn_channel.alpha, 0.5),
                                         np.ones_like(branch.fn_channel.beta))


def _add_conv(a: ConvWeights, b: ConvWeights) -> ConvWeights:
    return ConvWeights(a.weight + b.weight, None if a.bias is None else a.bias + b.bias)


class JointUpsampler:
    """Two 3x3 convs encode the low-res map, two more encode the guidance,
    then ``log2(factor)`` chained x2 joint DDF-Up modules and a 1x1 head.

    Module ``j`` reads guidance features computed at its own output
    resolution: the guidance image is subsampled with a stride to that grid
    and passed through the shared guidance encoder, so the encoder's 3x3
    support always spans neighbouring cells of the grid being written.
    The FN affine terms of every branch start near a 3x3 box filter rather
    than ``(1, 0)``, so an untrained module already averages its input.
    Unless ``spec.residual`` is ``"none"``, the head predicts a correction
    added to an interpolated copy of the input.
    """

    def __init__(self, spec: JointUpsamplerSpec, dtype=np.float64):
        self.spec = spec
        rng = _as_rng(spec.seed)
        wi, wg = spec.in_width, spec.guide_width
        ups = [DdfUpParams.init(wi, 2, spec.k, spec.sigma, "joint", wg, rng, dtype) for _ in range(spec.stages)]
        for up in ups:
            for branch in up.branches:
                _box_fn(branch)
        self.params = JointUpsamplerParams(
            _conv_init(rng, wi, spec.in_channels, dtype),
            _conv_init(rng, wi, wi, dtype),
            _conv_init(rng, wg, spec.guide_channels, dtype),
            _conv_init(rng, wg, wg, dtype),
            ups,
            Pointwise(_uniform(rng, (1, wi), wi, dtype), np.zeros(1, dtype)),
        )

    def _check(self, x, guide):
        check_tensor(x)
        check_tensor(guide, "guidance")
        f = self.spec.factor
        if guide.shape[2:] != (x.shape[2] * f, x.shape[3] * f):
            raise ShapeError(
                f"guidance {guide.shape[2]}x{guide.shape[3]} must be {f}x the input {x.shape[2]}x{x.shape[3]}"
            )
        if x.shape[1] != self.spec.in_channels or guide.shape[1] != self.spec.guide_channels:
            raise ShapeError("channel counts do not match the upsampler spec")

    def forward(self, x: np.ndarray, guide: np.ndarray):
        self._check(x, guide)
        p = self.params
        a1 = np.maximum(conv2d(x, p.in_conv1, _ENC), 0)
        h = np.maximum(conv2d(a1, p.in_conv2, _ENC), 0)
        up_caches = []
        for j, up in enumerate(p.ups):
            step = self.spec.factor >> (j + 1)
            gin = _guide_grid(guide, step)
            g1 = np.maximum(conv2d(gin, p.guide_conv1, _ENC), 0)
            g = np.maximum(conv2d(g1, p.guide_conv2, _ENC), 0)
            h, c = ddf_up_forward(h, g, up)
            up_caches.append((step, gin, g1, g, c))
        out = pointwise_conv(h, p.head.weight, p.head.bias)
        if self.spec.residual != "none":
            out += baseline_upsample(x, self.spec.factor, self.spec.residual)
        return out, (x, a1, up_caches, h)

    def __call__(self, x: np.ndarray, guide: np.ndarray) -> np.ndarray:
        return self.forward(x, guide)[0]

    def backward(self, grad: np.ndarray, cache) -> JointUpsamplerParams:
        x, a1, up_caches, h = cache
        p = self.params
        dh, dhw, dhb = pointwise_conv_backward(h, p.head.weight, p.head.bias, 1, grad)
        d_gc1 = d_gc2 = None
        d_ups = [None] * len(p.ups)
        for j in range(len(p.ups) - 1, -1, -1):
            step, gin, g1, g, c = up_caches[j]
            dh, d_ups[j], dg = ddf_up_backward(dh, p.ups[j], c)
            dg1, w2 = conv2d_backward(g1, p.guide_conv2, _ENC, dg * (g > 0))
            _, w1 = conv2d_backward(gin, p.guide_conv1, _ENC, dg1 * (g1 > 0))
            d_gc1 = w1 if d_gc1 is None else _add_conv(d_gc1, w1)
            d_gc2 = w2 if d_gc2 is None else _add_conv(d_gc2, w2)
        # the input-encoder output ``h0`` is positive wherever its grad flows
        h0 = up_caches[0][4][0]
        da1, d_ic2 = conv2d_backward(a1, p.in_conv2, _ENC, dh * (h0 > 0))
        _, d_ic1 = conv2d_backward(x, p.in_conv1, _ENC, da1 * (a1 > 0))
        return JointUpsamplerParams(d_ic1, d_ic2, d_gc1, d_gc2, d_ups, Pointwise(dhw, dhb))


def build_joint_upsampler(spec: JointUpsamplerSpec, dtype=np.float64) -> JointUpsampler:
    return JointUpsampler(spec, dtype)


WEIGHTS_KIND = "joint_upsampler"


def save_upsampler(net: JointUpsampler, manifest_path, extra: Optional[dict] = None) -> None:
    meta = {"kind": WEIGHTS_KIND, "spec": net.spec.to_dict()}
    meta.update(extra or {})
    save_params(manifest_path, net.params, meta)


def load_upsampler(manifest_path, dtype=np.float64) -> JointUpsampler:
    manifest, arrays = read_manifest(manifest_path)
    if manifest.get("kind") != WEIGHTS_KIND or "spec" not in manifest:
        raise ValueError(f"{manifest_path}: not a joint upsampler weights manifest")
    net = build_joint_upsampler(JointUpsamplerSpec(**manifest["spec"]), dtype)
    load_params_into(net.params, arrays)
    return net


@dataclass
class UpsampleTrainLog:
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)


def train_joint_upsampler(
    spec: JointUpsamplerSpec,
    samples: int = 200,
    size: int = 32,
    steps: int = 600,
    batch: int = 8,
    lr: float = 1e-2,
    data_seed: int = 0,
    log_every: int = 50,
    net: Optional[JointUpsampler] = None,
):
    """Adam on MSE over a seeded synthetic set with cosine learning-rate decay; returns ``(net, log)``.

    Pass ``net`` to continue training existing weights instead of a fresh network.
    """
    net = build_joint_upsampler(spec) if net is None else net
    depth, rgb = make_depth_pairs(samples, size, data_seed)
    lowres = downsample_nearest(depth, spec.factor)
    opt = Adam(lr)
    rng = np.random.default_rng(spec.seed + 1)
    log = UpsampleTrainLog()
    for step in range(steps):
        idx = rng.choice(samples, batch, replace=False)
        out, cache = net.forward(lowres[idx], rgb[idx])
        diff = out - depth[idx]
        loss = float(np.mean(diff * diff))
        grads = net.backward(2 * diff / diff.size, cache)
        opt.lr = 0.5 * lr * (1 + math.cos(math.pi * step / steps))
        opt.step(net.params, grads)
        if step % log_every == 0 or step == steps - 1:
            log.steps.append(step)
            log.loss.append(loss)
    return net, log


def evaluate_upsampler(net: JointUpsampler, samples: int = 50, size: int = 32, data_seed: int = 1):
    """Held-out RMSE of the network and the bicubic baseline."""
    depth, rgb = make_depth_pairs(samples, size, data_seed)
    lowres = downsample_nearest(depth, net.spec.factor)
    pred = np.concatenate([net(lowres[i : i + 10], rgb[i : i + 10]) for i in range(0, samples, 10)])
    return rmse(pred, depth), rmse(baseline_upsample(lowres, net.spec.factor, "bicubic"), depth)


# Training budgets for the bundled x4 / x8 networks (a few minutes each on one core)
# and the held-out split they are scored on.
BUNDLED_BUDGET = {
    4: {"train": {"samples": 400, "size": 32, "steps": 1500, "batch": 8, "lr": 1e-2},
        "eval": {"samples": 50, "size": 32, "data_seed": 1}},
    8: {"train": {"samples": 400, "size": 32, "steps": 2000, "batch": 8, "lr": 1e-2},
        "eval": {"samples": 50, "size": 32, "data_seed": 1}},
}


def train_bundled(factor: int, seed: int = 0):
    """Train the reference joint upsampler for ``factor`` under :data:`BUNDLED_BUDGET`."""
    if factor not in BUNDLED_BUDGET:
        raise ValueError(f"no bundled budget for factor {factor}; have {sorted(BUNDLED_BUDGET)}")
    spec = JointUpsamplerSpec(factor, seed=seed)
    return train_joint_upsampler(spec, log_every=250, **BUNDLED_BUDGET[factor]["train"])
