"""Reconstruction decoders driven by the class capsules.

Two variants:

* ``FcDecoder`` gets every class capsule with the non-target ones zeroed,
  flattened to one vector, so its first weight matrix is class-aware.
* ``DeconvDecoder`` gets only the selected capsule vector and upsamples it
  with transposed convolutions; the same weights serve every class, which
  is what keeps it small.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    conv2d,
    deconv2d,
    einsum,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
)

__all__ = ["FcDecoder", "DeconvDecoder", "make_decoder", "one_hot", "select_correct", "mask_all_but_correct"]


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def select_correct(caps, labels: np.ndarray) -> Tensor:
    """Pick each sample's target capsule: [b, n, d] -> [b, d]."""
    caps = as_tensor(caps)
    if caps.ndim != 3:
        raise ShapeError(f"expected [b, n_capsules, dim], got {caps.shape}")
    onehot = Tensor(one_hot(labels, caps.shape[1], dtype=caps.dtype))
    return einsum("bnd,bn->bd", caps, onehot)


def mask_all_but_correct(caps, labels: np.ndarray) -> Tensor:
    """Zero the non-target capsules and flatten: [b, n, d] -> [b, n*d]."""
    caps = as_tensor(caps)
    if caps.ndim != 3:
        raise ShapeError(f"expected [b, n_capsules, dim], got {caps.shape}")
    b, n, d = caps.shape
    onehot = Tensor(one_hot(labels, n, dtype=caps.dtype)[:, :, None])
    return reshape(mul(caps, onehot), (b, n * d))


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class FcDecoder:
    """Masked class capsules -> two hidden layers -> sigmoid pixels."""

    def __init__(
        self,
        rng: np.random.Generator,
        n_classes: int,
        caps_dim: int,
        image_size: int,
        channels: int,
        hidden: tuple[int, int] = (512, 1024),
    ):
        self.n_classes = n_classes
        self.caps_dim = caps_dim
        self.image_size = image_size
        self.channels = channels
        sizes = (n_classes * caps_dim, *hidden, channels * image_size * image_size)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(_uniform(rng, fan_in, (fan_in, fan_out)))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            yield f"fc{i}.weight", w
            yield f"fc{i}.bias", b

    def forward(self, caps, labels: np.ndarray) -> Tensor:
        """[b, n_classes, caps_dim] + labels -> [b, channels, size, size] in (0, 1)."""
        h = mask_all_but_correct(caps, labels)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = relu(matmul(h, w) + b)
        out = sigmoid(matmul(h, self.weights[-1]) + self.biases[-1])
        b_ = out.shape[0]
        return reshape(out, (b_, self.channels, self.image_size, self.image_size))


class DeconvDecoder:
    """Selected capsule -> small grid -> two stride-2 deconvs -> sigmoid pixels.

    Class-independent by construction: only the target capsule vector goes
    in, so permuting the other capsules cannot change the output.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        caps_dim: int,
        image_size: int,
        channels: int,
        base_channels: int = 64,
    ):
        if image_size % 4 != 0:
            raise ShapeError(f"deconv decoder needs an image size divisible by 4, got {image_size}")
        self.caps_dim = caps_dim
        self.image_size = image_size
        self.channels = channels
        self.base_channels = base_channels
        self.seed_hw = image_size // 4
        c1, c2 = base_channels // 2, base_channels // 4
        self.fc_weight = _uniform(rng, caps_dim, (caps_dim, base_channels * self.seed_hw * self.seed_hw))
        self.fc_bias = Tensor(np.zeros(base_channels * self.seed_hw * self.seed_hw), requires_grad=True)
        # Deconv kernels are [in_channels, out_channels, kh, kw].
        self.deconv1 = _uniform(rng, base_channels * 16, (base_channels, c1, 4, 4))
        self.deconv1_bias = Tensor(np.zeros((c1, 1, 1)), requires_grad=True)
        self.deconv2 = _uniform(rng, c1 * 16, (c1, c2, 4, 4))
        self.deconv2_bias = Tensor(np.zeros((c2, 1, 1)), requires_grad=True)
        self.head = _uniform(rng, c2, (channels, c2, 1, 1))
        self.head_bias = Tensor(np.zeros((channels, 1, 1)), requires_grad=True)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "fc.weight", self.fc_weight
        yield "fc.bias", self.fc_bias
        yield "deconv1.weight", self.deconv1
        yield "deconv1.bias", self.deconv1_bias
        yield "deconv2.weight", self.deconv2
        yield "deconv2.bias", self.deconv2_bias
        yield "head.weight", self.head
        yield "head.bias", self.head_bias

    def forward(self, caps, labels: np.ndarray) -> Tensor:
        """[b, n_classes, caps_dim] + labels -> [b, channels, size, size] in (0, 1)."""
        sel = select_correct(caps, labels)  # [b, caps_dim]
        if sel.shape[1] != self.caps_dim:
            raise ShapeError(f"expected capsules of dim {self.caps_dim}, got {sel.shape[1]}")
        h = relu(matmul(sel, self.fc_weight) + self.fc_bias)
        b = h.shape[0]
        h = reshape(h, (b, self.base_channels, self.seed_hw, self.seed_hw))
        h = relu(deconv2d(h, self.deconv1, stride=2, padding=1) + self.deconv1_bias)
        h = relu(deconv2d(h, self.deconv2, stride=2, padding=1) + self.deconv2_bias)
        return sigmoid(conv2d(h, self.head) + self.head_bias)


def make_decoder(kind: str, rng: np.random.Generator, n_classes: int, caps_dim: int, image_size: int, channels: int):
    if kind == "fc":
        return FcDecoder(rng, n_classes, caps_dim, image_size, channels)
    if kind == "deconv":
        return DeconvDecoder(rng, caps_dim, image_size, channels)
    raise ValueError(f"unknown decoder kind {kind!r} (choose 'fc' or 'deconv')")
