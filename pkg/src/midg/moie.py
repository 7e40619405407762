"""Mixture of Invariant Experts.

A router turns the fused in-domain vector into a distribution over K
feedforward experts; the mixture output is the router-weighted sum of all
expert outputs. A domain discriminator sits behind a gradient-reversal layer,
so minimizing its cross-entropy trains the discriminator while pushing the
router and experts toward domain-invariant representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import MLP, ContractError, Module, ShapeError, Tensor, as_tensor, grad_reverse, softmax

PROB_EPS = 1e-7


@dataclass(frozen=True)
class MoIEConfig:
    d_input: int
    n_experts: int = 4
    d_hidden: int = 32
    d_repr: int = 16
    grl_lambda: float = 1.0

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError(f"need at least one expert, got {self.n_experts}")
        if min(self.d_input, self.d_hidden, self.d_repr) <= 0:
            raise ValueError(f"dimensions must be positive: {self}")
        if self.grl_lambda < 0:
            raise ValueError(f"grl_lambda must be nonnegative, got {self.grl_lambda}")


def grl_schedule(progress: float) -> float:
    """Warm-up ramp 2 / (1 + exp(-10 p)) - 1 going from 0 to ~1 over training."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def binary_cross_entropy(prob: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=prob.dtype).reshape(prob.shape)
    if prob.size == 0:
        raise ContractError("binary cross-entropy over an empty batch")
    p = prob.clip(PROB_EPS, 1.0 - PROB_EPS)
    ll = p.log() * labels + (1.0 - p).log() * (1.0 - labels)
    return -ll.mean()


class MoIE(Module):
    def __init__(self, config: MoIEConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.router = MLP(c.d_input, c.d_hidden, c.n_experts, rng)
        self.experts = [MLP(c.d_input, c.d_hidden, c.d_repr, rng) for _ in range(c.n_experts)]
        self.discriminator = MLP(c.d_repr, c.d_hidden, 1, rng)
        self.head = MLP(c.d_repr, c.d_hidden, 1, rng)

    def _check(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.config.d_input:
            raise ShapeError(f"fused input must have length {self.config.d_input}, got shape {x.shape}")
        return x

    def route(self, x) -> Tensor:
        """Router weights, one simplex row per input row."""
        return softmax(self.router(self._check(x)), axis=-1)

    def expert_forward(self, x, k: int) -> Tensor:
        if not 0 <= k < self.config.n_experts:
            raise ContractError(f"expert index {k} out of range [0, {self.config.n_experts})")
        return self.experts[k](self._check(x))

    def forward(self, x) -> Tensor:
        x = self._check(x)
        weights = self.route(x)
        out = None
        for k, expert in enumerate(self.experts):
            term = weights[..., k : k + 1] * expert(x)
            out = term if out is None else out + term
        return out

    __call__ = forward

    def discriminate(self, h) -> Tensor:
        """Probability that ``h`` came from the out-of-domain group, shape (N,)."""
        h = as_tensor(h)
        if h.shape[-1] != self.config.d_repr:
            raise ShapeError(f"representation must have length {self.config.d_repr}, got {h.shape}")
        return self.discriminator(h).sigmoid()[..., 0]

    def loss_in(self, x, domain_labels, lam: float | None = None, h: Tensor | None = None) -> Tensor:
        """Domain cross-entropy through the gradient-reversal layer.

        ``h`` may be passed when the mixture output was already computed for
        ``x`` in the current graph.
        """
        labels = np.asarray(domain_labels)
        if labels.size == 0:
            raise ContractError("loss_in needs a nonempty batch")
        if h is None:
            h = self.forward(x)
        lam = self.config.grl_lambda if lam is None else lam
        return binary_cross_entropy(self.discriminate(grad_reverse(h, lam)), labels)

    def predict_in(self, h) -> Tensor:
        """In-domain sentiment score per row, shape (N,)."""
        h = as_tensor(h)
        if h.shape[-1] != self.config.d_repr:
            raise ShapeError(f"representation must have length {self.config.d_repr}, got {h.shape}")
        return self.head(h)[..., 0]


class FusionNet(Module):
    """Plain feedforward fusion used when the expert mixture is ablated."""

    def __init__(self, config: MoIEConfig, rng: np.random.Generator):
        self.config = config
        self.net = MLP(config.d_input, config.d_hidden, config.d_repr, rng)
        self.head = MLP(config.d_repr, config.d_hidden, 1, rng)

    def forward(self, x) -> Tensor:
        return self.net(as_tensor(x))

    __call__ = forward

    def predict_in(self, h) -> Tensor:
        return self.head(as_tensor(h))[..., 0]
