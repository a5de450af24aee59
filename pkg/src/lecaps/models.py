"""The two capsule classifiers: the wide single-scale baseline and the
lightweight multi-scale variant.

Both expose the same surface: ``forward`` produces class capsules,
``reconstruct`` decodes them, ``named_parameters`` yields every trainable
tensor with a hierarchical name. Routing logits are not parameters and
never appear in that listing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .layers import capsule_dropout, reshape_to_primary_caps, squash
from .decoders import make_decoder
from .pcg import PrimaryCapsuleGenerator, count_primary_caps
from .routing import RoutingLayer, classify
from .tensor import ShapeError, Tensor, as_tensor, conv2d, conv_output_size, relu

__all__ = [
    "ModelConfig",
    "baseline_config",
    "lecaps_config",
    "BaselineCapsNet",
    "LeCapsNet",
    "build_model",
    "count_baseline_primary_caps",
    "predict_classes",
    "expected_primary_caps",
]

VARIANTS = ("baseline", "lecaps")
DECODERS = ("fc", "deconv")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; everything needed to rebuild a model."""

    variant: str = "lecaps"
    image_size: int = 28
    in_channels: int = 1
    n_classes: int = 10
    routing_iters: int = 3
    decoder: str = "deconv"
    dropout_rate: float = 0.0
    width: float = 1.0
    primary_dim: int = 8
    class_dim: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def baseline_config(image_size: int = 28, in_channels: int = 1, **overrides) -> ModelConfig:
    defaults = dict(variant="baseline", decoder="fc", image_size=image_size, in_channels=in_channels)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def lecaps_config(image_size: int = 28, in_channels: int = 1, **overrides) -> ModelConfig:
    defaults = dict(variant="lecaps", decoder="deconv", image_size=image_size, in_channels=in_channels)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def count_baseline_primary_caps(image_size: int, primary_dim: int = 8, conv_channels: int = 256) -> int:
    """Capsules the baseline's reshaped conv stack emits for a square input."""
    after_first = conv_output_size(image_size, 9, 1, 0)
    grid = conv_output_size(after_first, 9, 2, 0)
    if grid < 1:
        raise ShapeError(f"image size {image_size} is too small for two 9x9 convs")
    return conv_channels * grid * grid // primary_dim


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class BaselineCapsNet:
    """Two wide 9x9 convs, reshape to capsules, route, decode.

    The second conv's activation map is regrouped directly into primary
    capsules and squashed; with 28x28 inputs that is a 6x6 grid of 256
    channels, i.e. 1152 eight-dimensional capsules.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.variant != "baseline":
            raise ValueError(f"config variant {config.variant!r} is not 'baseline'")
        self.config = config
        channels = 256
        self.conv1_weight = _uniform(rng, config.in_channels * 81, (channels, config.in_channels, 9, 9))
        self.conv1_bias = Tensor(np.zeros((channels, 1, 1)), requires_grad=True)
        self.conv2_weight = _uniform(rng, channels * 81, (channels, channels, 9, 9))
        self.conv2_bias = Tensor(np.zeros((channels, 1, 1)), requires_grad=True)
        self.primary_caps = count_baseline_primary_caps(config.image_size, config.primary_dim, channels)
        self.routing = RoutingLayer(
            rng,
            n_in=self.primary_caps,
            in_dim=config.primary_dim,
            n_out=config.n_classes,
            out_dim=config.class_dim,
            iterations=config.routing_iters,
        )
        self.decoder = make_decoder(
            config.decoder, rng, config.n_classes, config.class_dim, config.image_size, config.in_channels
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "conv1.weight", self.conv1_weight
        yield "conv1.bias", self.conv1_bias
        yield "conv2.weight", self.conv2_weight
        yield "conv2.bias", self.conv2_bias
        for name, p in self.routing.named_parameters():
            yield f"routing.{name}", p
        for name, p in self.decoder.named_parameters():
            yield f"decoder.{name}", p

    def primary_capsules(
        self, x, training: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        x = as_tensor(x)
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(f"expected input [b, {self.config.in_channels}, {size}, {size}], got {x.shape}")
        h = relu(conv2d(x, self.conv1_weight, stride=1) + self.conv1_bias)
        h = conv2d(h, self.conv2_weight, stride=2) + self.conv2_bias
        caps = squash(reshape_to_primary_caps(h, self.config.primary_dim))
        return capsule_dropout(caps, self.config.dropout_rate, training, rng)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Image batch -> class capsules [b, n_classes, class_dim]."""
        return self.routing.forward(self.primary_capsules(x, training, rng))

    def reconstruct(self, class_caps, labels: np.ndarray) -> Tensor:
        return self.decoder.forward(class_caps, labels)


class LeCapsNet:
    """Multi-scale primary capsule generator feeding the same routing head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.variant != "lecaps":
            raise ValueError(f"config variant {config.variant!r} is not 'lecaps'")
        self.config = config
        self.pcg = PrimaryCapsuleGenerator(
            rng,
            in_channels=config.in_channels,
            image_size=config.image_size,
            width=config.width,
            out_dim=config.primary_dim,
        )
        self.primary_caps = self.pcg.capsule_count
        self.routing = RoutingLayer(
            rng,
            n_in=self.primary_caps,
            in_dim=config.primary_dim,
            n_out=config.n_classes,
            out_dim=config.class_dim,
            iterations=config.routing_iters,
        )
        self.decoder = make_decoder(
            config.decoder, rng, config.n_classes, config.class_dim, config.image_size, config.in_channels
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in self.pcg.named_parameters():
            yield f"pcg.{name}", p
        for name, p in self.routing.named_parameters():
            yield f"routing.{name}", p
        for name, p in self.decoder.named_parameters():
            yield f"decoder.{name}", p

    def primary_capsules(
        self, x, training: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        bundle = self.pcg.forward(x, training=training, dropout_rate=self.config.dropout_rate, rng=rng)
        return bundle.data

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Image batch -> class capsules [b, n_classes, class_dim]."""
        return self.routing.forward(self.primary_capsules(x, training, rng))

    def reconstruct(self, class_caps, labels: np.ndarray) -> Tensor:
        return self.decoder.forward(class_caps, labels)


def build_model(config: ModelConfig, rng: np.random.Generator):
    if config.variant == "baseline":
        return BaselineCapsNet(config, rng)
    if config.variant == "lecaps":
        return LeCapsNet(config, rng)
    raise ValueError(f"unknown variant {config.variant!r}")


def predict_classes(model, x) -> np.ndarray:
    """Convenience: forward in eval mode and argmax the capsule lengths."""
    return classify(model.forward(x, training=False))


def expected_primary_caps(config: ModelConfig) -> int:
    """Capsule count implied by the configuration geometry alone."""
    if config.variant == "baseline":
        return count_baseline_primary_caps(config.image_size, config.primary_dim)
    return count_primary_caps(config.image_size)
