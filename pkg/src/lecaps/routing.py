"""Dynamic routing-by-agreement between capsule layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .layers import squash
from .tensor import ShapeError, Tensor, as_tensor, einsum, l2_norm, softmax

__all__ = ["RoutingLayer", "RoutingTrace", "capsule_lengths", "classify"]


@dataclass
class RoutingTrace:
    """Per-iteration routing internals, recorded for inspection and tests."""

    couplings: list[np.ndarray] = field(default_factory=list)  # each [b, n_in, n_out]
    output_norms: list[np.ndarray] = field(default_factory=list)  # each [b, n_out]


class RoutingLayer:
    """Routes input capsules to output capsules by iterative agreement.

    The transform weights are the only parameters. Coupling logits start at
    zero on every forward pass and live purely inside the loop; they are
    never exposed through named_parameters, so no optimizer can touch them.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        n_in: int,
        in_dim: int,
        n_out: int,
        out_dim: int,
        iterations: int = 3,
        detach_predictions: bool = False,
    ):
        if iterations < 1:
            raise ValueError(f"routing needs at least one iteration, got {iterations}")
        self.n_in = n_in
        self.in_dim = in_dim
        self.n_out = n_out
        self.out_dim = out_dim
        self.iterations = iterations
        self.detach_predictions = detach_predictions
        self.weights = Tensor(
            rng.normal(0.0, 0.04, size=(n_in, n_out, out_dim, in_dim)), requires_grad=True
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "weights", self.weights

    def forward(self, u, trace: RoutingTrace | None = None) -> Tensor:
        """[b, n_in, in_dim] capsules -> [b, n_out, out_dim] squashed capsules."""
        u = as_tensor(u)
        if u.ndim != 3 or u.shape[1] != self.n_in or u.shape[2] != self.in_dim:
            raise ShapeError(f"expected input [b, {self.n_in}, {self.in_dim}], got {u.shape}")
        # Every input capsule predicts every output capsule.
        u_hat = einsum("ijdk,bik->bijd", self.weights, u)  # [b, n_in, n_out, out_dim]
        u_hat_detached = u_hat.detach() if self.detach_predictions else u_hat

        logits = Tensor(np.zeros((u.shape[0], self.n_in, self.n_out), dtype=u.dtype))
        v = None
        for r in range(self.iterations):
            final = r == self.iterations - 1
            couplings = softmax(logits, axis=2)  # rows over outputs sum to 1
            uh = u_hat if final else u_hat_detached
            s = einsum("bij,bijd->bjd", couplings, uh)
            v = squash(s)
            if trace is not None:
                trace.couplings.append(np.array(couplings.data, copy=True))
                trace.output_norms.append(np.array(l2_norm(v.detach(), axis=-1).data, copy=True))
            if not final:
                agreement = einsum("bijd,bjd->bij", uh, v)
                logits = logits + agreement
        return v


def capsule_lengths(v) -> Tensor:
    """Norms of the class capsules: [b, n_out, d] -> [b, n_out]."""
    return l2_norm(v, axis=-1)


def classify(v) -> np.ndarray:
    """Predicted class indices (argmax of capsule length, ties to the lowest index)."""
    lengths = capsule_lengths(as_tensor(v).detach())
    return np.argmax(lengths.data, axis=-1)
