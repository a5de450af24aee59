"""Capsule layer primitives: squash, capsule-wise fully-connected maps, dropout.

A capsule is the last axis of a [batch, n_capsules, dim] tensor. Squashing
maps activity vectors into the open unit ball so their length reads as a
probability; all layers here emit squashed capsules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    conv_output_size,
    einsum,
    extract_patches,
    mul,
    reduce_sum,
    reshape,
    sqrt,
)

__all__ = ["squash", "CfcLayer", "capsule_dropout", "reshape_to_primary_caps", "CapsuleBundle"]


def squash(s, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Shrink vectors to length |s|^2 / (1 + |s|^2), preserving direction.

    The norm in the denominator carries an eps so the zero vector maps to
    the zero vector with a finite gradient. Output lengths are strictly
    below 1.
    """
    s = as_tensor(s)
    sq = reduce_sum(mul(s, s), axis=axis, keepdims=True)
    scale = sq / ((sq + 1.0) * sqrt(sq + eps))
    return mul(s, scale)


class CfcLayer:
    """Capsule fully-connected layer over a feature-map grid.

    Unlike a convolution, weights are not shared across space: each output
    grid position owns its own kernel matrix, so each position learns to
    summarize one specific receptive field. Output capsules are squashed.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        in_hw: tuple[int, int],
        kernel_size: int,
        stride: int,
        out_dim: int,
    ):
        ih, iw = in_hw
        self.in_channels = in_channels
        self.in_hw = (ih, iw)
        self.kernel_size = kernel_size
        self.stride = stride
        self.out_dim = out_dim
        oh = conv_output_size(ih, kernel_size, stride, 0)
        ow = conv_output_size(iw, kernel_size, stride, 0)
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {kernel_size} stride {stride} does not fit grid {ih}x{iw}")
        self.out_hw = (oh, ow)
        fan_in = in_channels * kernel_size * kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        self.kernels = Tensor(
            rng.uniform(-bound, bound, size=(oh * ow, fan_in, out_dim)), requires_grad=True
        )
        self.bias = Tensor(np.zeros((oh * ow, out_dim)), requires_grad=True)

    @property
    def out_positions(self) -> int:
        return self.out_hw[0] * self.out_hw[1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "kernels", self.kernels
        yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        """[b, c, h, w] feature map -> [b, positions, out_dim] squashed capsules."""
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != self.in_hw:
            raise ShapeError(f"expected input [b, {self.in_channels}, {self.in_hw[0]}, {self.in_hw[1]}], got {x.shape}")
        k = self.kernel_size
        cols = extract_patches(x, k, k, self.stride, 0)  # [b, p, c*k*k]
        pre = einsum("bpk,pkd->bpd", cols, self.kernels) + self.bias
        return squash(pre)


def capsule_dropout(
    caps,
    rate: float,
    training: bool,
    rng: np.random.Generator | None = None,
    rescale: bool = False,
) -> Tensor:
    """Zero whole capsules (every component) independently with probability rate.

    Evaluation mode returns the input unchanged, bit for bit. No 1/(1-rate)
    rescale by default: capsule lengths are read as probabilities and
    rescaling would push them out of the unit ball; pass rescale=True for
    the conventional inverted scaling.
    """
    caps = as_tensor(caps)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if caps.ndim < 2:
        raise ShapeError(f"capsule_dropout expects [..., n_capsules, dim], got {caps.shape}")
    if not training or rate == 0.0:
        return caps
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(caps.shape[:-1]) >= rate).astype(caps.dtype)[..., None]
    if rescale:
        keep = keep / caps.dtype.type(1.0 - rate)
    return mul(caps, Tensor(keep, dtype=caps.dtype))


def reshape_to_primary_caps(x, dim: int) -> Tensor:
    """Regroup a [b, c, h, w] feature map into [b, c*h*w/dim, dim] capsules."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected a [b, c, h, w] feature map, got {x.shape}")
    b, c, h, w = x.shape
    features = c * h * w
    if features % dim != 0:
        raise ShapeError(f"cannot split {features} features ({c}x{h}x{w}) into capsules of dim {dim}")
    return reshape(x, (b, features // dim, dim))


@dataclass
class CapsuleBundle:
    """A set of capsules assembled from several scales.

    scale_layout records (count, native_dim) per scale in concatenation
    order; data holds the capsules after any per-scale transforms, so
    data.shape[1] must equal the sum of the counts.
    """

    data: Tensor
    scale_layout: tuple[tuple[int, int], ...]

    def __post_init__(self):
        total = sum(count for count, _ in self.scale_layout)
        if self.data.ndim != 3 or self.data.shape[1] != total:
            raise ShapeError(f"bundle data {self.data.shape} does not match layout total {total}")

    @property
    def total_capsules(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]
