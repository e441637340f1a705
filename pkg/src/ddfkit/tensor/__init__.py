from .geometry import ConvWeights, KernelGeometry, ShapeError, check_tensor
from .grad import (
    conv2d_backward,
    depthwise_conv2d_backward,
    fully_connected_backward,
    global_avg_pool_backward,
    pointwise_conv_backward,
    relu_backward,
)
from .io import (
    TensorFormatError,
    decode_tensor,
    encode_tensor,
    load_params_into,
    load_tensor,
    named_arrays,
    read_manifest,
    save_params,
    save_tensor,
)
from .ops import (
    channel_chunk,
    conv2d,
    depthwise_conv2d,
    fully_connected,
    global_avg_pool,
    pixel_shuffle,
    pointwise_conv,
    relu,
    space_to_depth,
    unfold,
)

__all__ = [
    "ConvWeights",
    "KernelGeometry",
    "ShapeError",
    "TensorFormatError",
    "channel_chunk",
    "check_tensor",
    "conv2d",
    "conv2d_backward",
    "decode_tensor",
    "depthwise_conv2d",
    "depthwise_conv2d_backward",
    "encode_tensor",
    "fully_connected",
    "fully_connected_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "load_params_into",
    "load_tensor",
    "named_arrays",
    "pixel_shuffle",
    "pointwise_conv",
    "pointwise_conv_backward",
    "read_manifest",
    "relu",
    "relu_backward",
    "save_params",
    "save_tensor",
    "space_to_depth",
    "unfold",
]
