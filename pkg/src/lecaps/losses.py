"""Margin loss on capsule lengths plus the reconstruction regularizer."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .decoders import one_hot
from .tensor import ShapeError, Tensor, as_tensor, reduce_mean, reduce_sum, relu

__all__ = ["LossParams", "margin_loss", "reconstruction_loss", "total_loss"]


@dataclass(frozen=True)
class LossParams:
    """Margin-loss margins and the reconstruction weight.

    The hard round tightens both margins, forcing correct-class lengths
    above 0.95 and the rest below 0.05.
    """

    m_plus: float = 0.9
    m_minus: float = 0.1
    loss_lambda: float = 0.5
    recon_weight: float = 0.0005

    def hard_round(self) -> "LossParams":
        return replace(self, m_plus=0.95, m_minus=0.05)


def margin_loss(lengths, targets: np.ndarray, params: LossParams = LossParams()) -> Tensor:
    """Two-sided margin loss averaged over the batch.

    Per class k: T_k * max(0, m_plus - |v_k|)^2
                 + loss_lambda * (1 - T_k) * max(0, |v_k| - m_minus)^2,
    summed over classes. `lengths` is [b, n_classes] of capsule norms.
    """
    lengths = as_tensor(lengths)
    if lengths.ndim != 2:
        raise ShapeError(f"expected [b, n_classes] lengths, got {lengths.shape}")
    onehot = Tensor(one_hot(targets, lengths.shape[1], dtype=lengths.dtype))
    present = relu(params.m_plus - lengths) ** 2
    absent = relu(lengths - params.m_minus) ** 2
    per_class = onehot * present + params.loss_lambda * (1.0 - onehot) * absent
    return reduce_mean(reduce_sum(per_class, axis=1))


def reconstruction_loss(recon, images) -> Tensor:
    """Mean over the batch of the per-sample sum of squared pixel errors."""
    recon, images = as_tensor(recon), as_tensor(images)
    if recon.shape != images.shape:
        raise ShapeError(f"reconstruction shape {recon.shape} does not match images {images.shape}")
    diff = (recon - images).reshape(recon.shape[0], -1)
    per_sample = reduce_sum(diff * diff, axis=1)
    return reduce_mean(per_sample)


def total_loss(
    lengths,
    targets: np.ndarray,
    recon,
    images,
    params: LossParams = LossParams(),
) -> tuple[Tensor, dict[str, float]]:
    """Margin loss + weighted reconstruction loss, with scalar parts for logging."""
    margin = margin_loss(lengths, targets, params)
    reconstruction = reconstruction_loss(recon, images)
    total = margin + params.recon_weight * reconstruction
    parts = {
        "margin": margin.item(),
        "reconstruction": reconstruction.item(),
        "total": total.item(),
    }
    return total, parts
