"""Split an encoded modality feature into an in-domain and an out-of-domain code.

Two independent Gaussian encoders map the feature to posterior parameters; a
decoder reconstructs the feature from one sample of each code. The training
signal is a variational upper bound on the mutual information between the two
codes: KL of each posterior to a standard-normal prior minus the expected
reconstruction log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import MLP, Module, ShapeError, Tensor, as_tensor, concat

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianCode:
    mean: Tensor
    logvar: Tensor

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.logvar.data)


@dataclass
class DisentangledPair:
    in_code: GaussianCode
    out_code: GaussianCode
    in_sample: Tensor
    out_sample: Tensor


@dataclass(frozen=True)
class DisentangleConfig:
    d_input: int
    d_code: int = 8
    d_hidden: int = 16

    def __post_init__(self):
        if min(self.d_input, self.d_code, self.d_hidden) <= 0:
            raise ValueError(f"all dimensions must be positive: {self}")


def sample(code: GaussianCode, noise) -> Tensor:
    """Reparameterized draw ``mean + exp(logvar / 2) * noise``."""
    noise = as_tensor(noise)
    if noise.shape[-1] != code.mean.shape[-1]:
        raise ShapeError(f"noise shape {noise.shape} does not match code {code.mean.shape}")
    return code.mean + (code.logvar * 0.5).exp() * noise


def kl_to_prior(code: GaussianCode) -> Tensor:
    """Per-row KL(N(mean, exp(logvar)) || N(0, I)); shape drops the last axis."""
    # expm1(u) - u >= 0 survives rounding, exp(u) - 1 - u does not
    terms = code.mean.square() + (code.logvar.expm1() - code.logvar)
    return terms.sum(axis=-1) * 0.5


class Disentangler(Module):
    """Encoders and decoder for a single modality."""

    def __init__(self, config: DisentangleConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.in_encoder = MLP(c.d_input, c.d_hidden, 2 * c.d_code, rng)
        self.out_encoder = MLP(c.d_input, c.d_hidden, 2 * c.d_code, rng)
        self.decoder = MLP(2 * c.d_code, c.d_hidden, c.d_input, rng)

    def encode(self, a_m, which: str) -> GaussianCode:
        a_m = as_tensor(a_m)
        if a_m.shape[-1] != self.config.d_input:
            raise ShapeError(f"expected feature length {self.config.d_input}, got shape {a_m.shape}")
        if which == "in":
            raw = self.in_encoder(a_m)
        elif which == "out":
            raw = self.out_encoder(a_m)
        else:
            raise ValueError(f"which must be 'in' or 'out', got {which!r}")
        d = self.config.d_code
        return GaussianCode(raw[..., :d], raw[..., d:].clip(LOGVAR_MIN, LOGVAR_MAX))

    def reconstruct(self, in_sample: Tensor, out_sample: Tensor) -> Tensor:
        d = self.config.d_code
        if in_sample.shape[-1] != d or out_sample.shape[-1] != d:
            raise ShapeError(f"samples must have length {d}: {in_sample.shape}, {out_sample.shape}")
        return self.decoder(concat([in_sample, out_sample], axis=-1))

    def forward(self, a_m, noise_in=None, noise_out=None) -> DisentangledPair:
        """Encode both branches; with no noise given the samples are the means."""
        in_code = self.encode(a_m, "in")
        out_code = self.encode(a_m, "out")
        in_sample = in_code.mean if noise_in is None else sample(in_code, noise_in)
        out_sample = out_code.mean if noise_out is None else sample(out_code, noise_out)
        return DisentangledPair(in_code, out_code, in_sample, out_sample)

    __call__ = forward

    def log_likelihood(self, a_m, pair: DisentangledPair) -> Tensor:
        """Unit-variance Gaussian log p(a_m | in_sample, out_sample), per row."""
        a_m = as_tensor(a_m)
        residual = a_m - self.reconstruct(pair.in_sample, pair.out_sample)
        return residual.square().sum(axis=-1) * -0.5 - 0.5 * self.config.d_input * LOG_2PI

    def loss_dis(self, a_m, pair: DisentangledPair) -> Tensor:
        """Mutual-information upper bound, averaged over the batch."""
        bound = kl_to_prior(pair.in_code) + kl_to_prior(pair.out_code) - self.log_likelihood(a_m, pair)
        return bound.mean()
