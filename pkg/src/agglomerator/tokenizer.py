"""Patch embedding: image pixels to an (h, w, d) grid of column inputs.

Two interchangeable front ends produce the grid, both downsampling by
exactly 4 in each spatial dimension:

* `conv_tokenize` - the default convolutional stack, two stages of
  [3x3 conv stride 1 -> gelu -> 3x3 conv stride 2], widths d/2 then d.
* `linear_embed` - the ablation variant: every non-overlapping 4x4 pixel
  block through one shared affine map to d dims.

Inputs are NHWC float arrays, already normalized by the data pipeline.
Images whose height or width is not divisible by 4 are rejected up front.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GeometryError(ValueError):
    """Input pixel geometry incompatible with the /4 patch grid."""


def check_geometry(height: int, width: int, channels: int) -> tuple[int, int]:
    """Validate (H, W, C) at configuration time; returns the (h, w) grid."""
    if height % 4 or width % 4:
        raise GeometryError(f"input size {height}x{width} not divisible by 4; "
                            "the patch grid requires H % 4 == 0 and W % 4 == 0")
    if channels not in (1, 3):
        raise GeometryError(f"expected 1 or 3 input channels, got {channels}")
    return height // 4, width // 4


def init_conv_tokenizer(d: int, channels: int, gen: np.random.Generator,
                        dtype=np.float32) -> dict[str, Tensor]:
    """He-normal conv kernels, zero biases. d must be even (stage width d/2)."""
    if d % 2:
        raise ValueError(f"embedding dim d must be even for the d/2 stage width, got {d}")
    half = d // 2
    plan = {
        "conv1": (3, 3, channels, half),
        "conv2": (3, 3, half, half),
        "conv3": (3, 3, half, d),
        "conv4": (3, 3, d, d),
    }
    params = {}
    for name, shape in plan.items():
        fan_in = shape[0] * shape[1] * shape[2]
        w = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(shape[3], dtype=dtype), requires_grad=True,
                                     name=f"{name}.b")
    return params


def conv_tokenize(images: Tensor, params: dict[str, Tensor]) -> Tensor:
    """(B, H, W, C) -> (B, H/4, W/4, d), differentiable end to end."""
    x = T.conv2d(images, params["conv1.w"], stride=1, padding=1) + params["conv1.b"]
    x = T.gelu(x)
    x = T.conv2d(x, params["conv2.w"], stride=2, padding=1) + params["conv2.b"]
    x = T.conv2d(x, params["conv3.w"], stride=1, padding=1) + params["conv3.b"]
    x = T.gelu(x)
    x = T.conv2d(x, params["conv4.w"], stride=2, padding=1) + params["conv4.b"]
    return x


def init_linear_embed(d: int, channels: int, gen: np.random.Generator,
                      dtype=np.float32) -> dict[str, Tensor]:
    fan_in = 16 * channels
    limit = np.sqrt(6.0 / (fan_in + d))
    w = gen.uniform(-limit, limit, size=(fan_in, d))
    return {
        "embed.w": Tensor(w.astype(dtype), requires_grad=True, name="embed.w"),
        "embed.b": Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name="embed.b"),
    }


def linear_embed(images: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Shared affine map over non-overlapping 4x4 blocks: (B,H,W,C) -> (B,H/4,W/4,d)."""
    b, height, width, c = images.shape
    h, w = height // 4, width // 4
    # space-to-depth: (B,H,W,C) -> (B,h,w,16C), pure reshape/transpose
    x = T.reshape(images, (b, h, 4, w, 4, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, h, w, 16 * c))
    return x @ params["embed.w"] + params["embed.b"]
