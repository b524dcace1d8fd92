"""Minimal dense-tensor arithmetic with a reverse-mode tape."""
from .io import from_bytes, load_a3t, read_tensor, save_a3t, to_bytes, write_tensor
from .ops import (
    GELU_A,
    GELU_C,
    NORM_EPS,
    ConvParams,
    add,
    add_n,
    bilinear_resize,
    bilinear_sample,
    branch_probe,
    clamp_above,
    clamp_below,
    concat_channels,
    conv2d,
    deform_conv2d,
    depthwise_conv2d,
    finalize_offsets,
    flip_channels,
    gelu,
    group_norm,
    hadamard,
    layer_norm,
    nearest_resize,
    normalize_sum,
    reshape,
    scale,
    sigmoid,
    slice_channels,
    split_channels,
    sum_all,
)
from .tensor import Gradients, Tape, Tensor, as_tensor, grad

__all__ = [name for name in dir() if not name.startswith("_")]
