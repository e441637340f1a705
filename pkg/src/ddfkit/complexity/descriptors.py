"""Network descriptors: JSON loading, block expansion and the bundled ResNets."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .costs import LayerSpec, NetworkDescriptor

BUILTINS = ("resnet50", "ddf-resnet50", "resnet101", "ddf-resnet101")
_DEPTHS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}


def expand_bottleneck(entry: dict) -> list[LayerSpec]:
    """ResNet v1.5 bottleneck (stride on the 3x3 position) as explicit layers."""
    c_in, mid, c_out = entry["c_in"], entry["c_mid"], entry["c_out"]
    stride = entry.get("stride", 1)
    spatial = entry.get("spatial", "conv")
    tag = entry.get("name", "block")
    layers = [
        LayerSpec("pointwise", c_in, mid, block_start=True, name=f"{tag}.reduce"),
        LayerSpec("norm", mid, mid, name=f"{tag}.norm1"),
    ]
    if spatial == "ddf":
        layers.append(LayerSpec("ddf", mid, mid, k=3, stride=stride, sigma=entry.get("sigma", 0.2), name=f"{tag}.ddf"))
    elif spatial == "conv":
        layers.append(LayerSpec("conv", mid, mid, k=3, stride=stride, name=f"{tag}.conv3x3"))
    else:
        raise ValueError(f"{tag}: unknown spatial layer {spatial!r}")
    layers += [
        LayerSpec("norm", mid, mid, name=f"{tag}.norm2"),
        LayerSpec("pointwise", mid, c_out, name=f"{tag}.expand"),
        LayerSpec("norm", c_out, c_out, name=f"{tag}.norm3"),
    ]
    if stride != 1 or c_in != c_out:
        layers += [
            LayerSpec("pointwise", c_in, c_out, stride=stride, src="block_input", name=f"{tag}.proj"),
            LayerSpec("norm", c_out, c_out, src="block_input", name=f"{tag}.proj_norm"),
        ]
    layers.append(LayerSpec("add", c_out, c_out, name=f"{tag}.add"))
    return layers


def descriptor_from_dict(data: dict) -> NetworkDescriptor:
    for key in ("name", "input", "layers"):
        if key not in data:
            raise ValueError(f"descriptor is missing {key!r}")
    layers: list[LayerSpec] = []
    for entry in data["layers"]:
        if entry.get("kind") == "bottleneck":
            layers += expand_bottleneck(entry)
        else:
            layers.append(LayerSpec.from_dict(entry))
    return NetworkDescriptor(data["name"], tuple(data["input"]), layers)


def load_descriptor(path) -> NetworkDescriptor:
    return descriptor_from_dict(json.loads(Path(path).read_text()))


def resnet_dict(depth: int = 50, ddf: bool = False, sigma: float = 0.2, classes: int = 1000) -> dict:
    """Compact (block-level) descriptor of a ResNet-50/101, optionally with DDF 3x3s."""
    name = f"{'ddf-' if ddf else ''}resnet{depth}"
    layers: list[dict] = [
        {"kind": "conv", "c_in": 3, "c_out": 64, "k": 7, "stride": 2, "name": "stem.conv"},
        {"kind": "norm", "c": 64, "name": "stem.norm"},
        {"kind": "pool", "c": 64, "k": 3, "stride": 2, "name": "stem.maxpool"},
    ]
    c = 64
    for s, (blocks, width) in enumerate(zip(_DEPTHS[depth], (64, 128, 256, 512))):
        for b in range(blocks):
            entry = {
                "kind": "bottleneck",
                "name": f"layer{s + 1}.{b}",
                "c_in": c,
                "c_mid": width,
                "c_out": width * 4,
                "stride": 2 if (b == 0 and s > 0) else 1,
                "spatial": "ddf" if ddf else "conv",
            }
            if ddf:
                entry["sigma"] = sigma
            layers.append(entry)
            c = width * 4
    layers += [
        {"kind": "pool", "c": c, "global_pool": True, "name": "head.avgpool"},
        {"kind": "fc", "c_in": c, "c_out": classes, "bias": True, "name": "head.fc"},
    ]
    return {"name": name, "input": [3, 224, 224], "layers": layers}


def builtin(name: str) -> NetworkDescriptor:
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin descriptor {name!r}; choose from {', '.join(BUILTINS)}")
    ref = resources.files("ddfkit.complexity").joinpath("data", f"{name}.json")
    return descriptor_from_dict(json.loads(ref.read_text()))


def write_builtins(directory) -> None:
    directory = Path(directory)
    for depth in (50, 101):
        for ddf in (False, True):
            d = resnet_dict(depth, ddf)
            (directory / f"{d['name']}.json").write_text(json.dumps(d, indent=1) + "\n")


# Published model sizes: (params, MAC-convention FLOPs).
PUBLISHED = {
    "resnet50": (25.6e6, 4.1e9),
    "ddf-resnet50": (16.8e6, 2.3e9),
    "resnet101": (44.5e6, 7.8e9),
    "ddf-resnet101": (28.1e6, 4.1e9),
}
# DDF-ResNet50 under a squeeze-ratio sweep.
PUBLISHED_SIGMA = {0.2: (16.8e6, 2.298e9), 0.3: (18.1e6, 2.299e9), 0.4: (19.4e6, 2.300e9)}
PARAMS_TOL = 0.02
FLOPS_TOL = 0.05
