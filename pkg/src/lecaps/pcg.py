"""Lightweight multi-scale primary capsule generator.

A shared convolutional backbone is tapped at three depths; each tap feeds a
capsule fully-connected layer that produces one small capsule grid, the
grids get linearly mapped to a common dimension, squashed, and concatenated
into one bundle. Spatial resolution drops fast (stride-2 convs), which is
where the speedup over a wide single-scale primary layer comes from.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .layers import CapsuleBundle, CfcLayer, capsule_dropout, squash
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    conv_output_size,
    matmul,
    relu,
)

__all__ = ["PrimaryCapsuleGenerator", "count_primary_caps", "pcg_geometry"]

# Backbone layout: (kernel, stride, padding) per conv, taps after each one.
_CONVS = ((5, 2, 2), (5, 2, 2), (5, 1, 2))
# CFC grid reduction per tap: (kernel, stride).
_CFCS = ((4, 2), (2, 1), (2, 1))


def pcg_geometry(image_size: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Per-tap feature-map sizes and capsule-grid sizes for a square input."""
    feature_sizes = []
    size = image_size
    for kernel, stride, padding in _CONVS:
        size = conv_output_size(size, kernel, stride, padding)
        if size < 1:
            raise ShapeError(f"image size {image_size} is too small for the backbone")
        feature_sizes.append(size)
    grid_sizes = []
    for feat, (kernel, stride) in zip(feature_sizes, _CFCS):
        grid = conv_output_size(feat, kernel, stride, 0)
        if grid < 1:
            raise ShapeError(f"image size {image_size} is too small for the capsule grids")
        grid_sizes.append(grid)
    return tuple(feature_sizes), tuple(grid_sizes)


def count_primary_caps(image_size: int) -> int:
    """Number of primary capsules the generator emits for a square input."""
    _, grids = pcg_geometry(image_size)
    return sum(g * g for g in grids)


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class PrimaryCapsuleGenerator:
    """Backbone convs + per-scale CFC layers + per-scale transforms.

    Capsule dims grow with depth (default 4/6/8) and every scale is mapped
    to ``out_dim`` so the bundle is homogeneous. The transform output is
    squashed again, keeping every emitted capsule inside the unit ball.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        image_size: int,
        width: float = 1.0,
        capsule_dims: tuple[int, int, int] = (4, 6, 8),
        out_dim: int = 8,
    ):
        if width <= 0:
            raise ValueError(f"width multiplier must be positive, got {width}")
        self.in_channels = in_channels
        self.image_size = image_size
        self.out_dim = out_dim
        channels = [max(1, round(64 * width)), max(1, round(128 * width))]
        channels.append(channels[1])
        feature_sizes, _ = pcg_geometry(image_size)

        self.conv_weights: list[Tensor] = []
        self.conv_biases: list[Tensor] = []
        prev = in_channels
        for ch, (kernel, _, _) in zip(channels, _CONVS):
            fan_in = prev * kernel * kernel
            self.conv_weights.append(_uniform(rng, fan_in, (ch, prev, kernel, kernel)))
            # Stored broadcast-ready against [b, c, h, w].
            self.conv_biases.append(Tensor(np.zeros((ch, 1, 1)), requires_grad=True))
            prev = ch
        self.conv_strides = tuple(s for _, s, _ in _CONVS)
        self.conv_paddings = tuple(p for _, _, p in _CONVS)

        self.cfc_layers: list[CfcLayer] = []
        for ch, feat, dim, (kernel, stride) in zip(channels, feature_sizes, capsule_dims, _CFCS):
            self.cfc_layers.append(CfcLayer(rng, ch, (feat, feat), kernel, stride, dim))

        self.transforms: list[Tensor] = [_uniform(rng, dim, (dim, out_dim)) for dim in capsule_dims]
        self.scale_layout = tuple((layer.out_positions, dim) for layer, dim in zip(self.cfc_layers, capsule_dims))

    @property
    def capsule_count(self) -> int:
        return sum(count for count, _ in self.scale_layout)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases), start=1):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b
        for i, layer in enumerate(self.cfc_layers, start=1):
            for name, p in layer.named_parameters():
                yield f"cfc{i}.{name}", p
        for i, m in enumerate(self.transforms, start=1):
            yield f"transform{i}", m

    def scale_capsules(self, x) -> list[Tensor]:
        """Per-scale capsule grids after the common-dimension transform."""
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ShapeError(
                f"expected input [b, {self.in_channels}, {self.image_size}, {self.image_size}], got {x.shape}"
            )
        scales = []
        feat = x
        for w, b, stride, padding, layer, m in zip(
            self.conv_weights, self.conv_biases, self.conv_strides, self.conv_paddings, self.cfc_layers, self.transforms
        ):
            feat = relu(conv2d(feat, w, stride, padding) + b)
            caps = layer.forward(feat)  # [b, positions, native_dim]
            scales.append(squash(matmul(caps, m)))  # [b, positions, out_dim]
        return scales

    def forward(
        self,
        x,
        training: bool = False,
        dropout_rate: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> CapsuleBundle:
        """[b, c, h, w] image batch -> bundle of [b, total, out_dim] capsules."""
        scales = self.scale_capsules(x)
        data = concat(scales, axis=1)
        data = capsule_dropout(data, dropout_rate, training, rng)
        return CapsuleBundle(data, self.scale_layout)
