"""Cross-modal adapter for the out-of-domain branch.

For each target modality, the target code queries the two other modalities
with multi-head attention (each modality is one token). The attention output
goes through dropout and an MLP, is scaled by a sigmoid gate computed from the
target, and is added back onto the target. The three injected codes are
concatenated and fused by one nonlinear layer before the regression head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MLP,
    ConfigError,
    ContractError,
    Linear,
    Module,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    dropout,
    softmax,
    stack,
)

MODALITIES = ("t", "a", "v")
SOURCES = {"t": ("a", "v"), "a": ("t", "v"), "v": ("t", "a")}


@dataclass(frozen=True)
class AdapterConfig:
    d_code: int
    heads: int = 4
    dropout: float = 0.1
    d_hidden: int = 16
    d_fuse: int = 16
    shared_source_proj: bool = False
    # one source supplies keys, the other values (single-token attention)
    literal_kv: bool = False

    def __post_init__(self):
        if self.heads <= 0 or self.d_code % self.heads:
            raise ConfigError(f"d_code={self.d_code} must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def d_k(self) -> int:
        return self.d_code // self.heads


@dataclass
class Attention:
    weights: Tensor  # (N, heads, n_keys)
    mixed: Tensor  # (N, d_code), before the output projection
    output: Tensor  # (N, d_code)


def scaled_dot_attention(query: Tensor, keys: list[Tensor], values: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Single-query attention over a handful of key/value tokens.

    ``query`` and every key/value have shape (N, heads, d_k). Returns the
    softmax weights (N, heads, n_keys) and the mixed values (N, heads, d_k).
    """
    d_k = query.shape[-1]
    scale = 1.0 / math.sqrt(d_k)
    scores = stack([(query * k).sum(axis=-1) * scale for k in keys], axis=-1)
    weights = softmax(scores, axis=-1)
    mixed = None
    for j, v in enumerate(values):
        term = weights[..., j : j + 1] * v
        mixed = term if mixed is None else mixed + term
    return weights, mixed


class ModalityAdapter(Module):
    """Knowledge injection into one target modality."""

    def __init__(self, config: AdapterConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_code
        self.query = Linear(d, d, rng)
        self.key1 = Linear(d, d, rng)
        self.value1 = Linear(d, d, rng)
        if not config.shared_source_proj:
            self.key2 = Linear(d, d, rng)
            self.value2 = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self.mlp = MLP(d, config.d_hidden, d, rng)
        self.gate_proj = Linear(d, d, rng)

    def _heads(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], self.config.heads, self.config.d_k)

    def cross_attend(self, target, source1, source2) -> Attention:
        target, source1, source2 = (as_tensor(x) for x in (target, source1, source2))
        d = self.config.d_code
        for x in (target, source1, source2):
            if x.ndim != 2 or x.shape[-1] != d:
                raise ShapeError(f"adapter inputs must be (N, {d}), got {x.shape}")
        key2 = self.key1 if self.config.shared_source_proj else self.key2
        value2 = self.value1 if self.config.shared_source_proj else self.value2
        q = self._heads(self.query(target))
        if self.config.literal_kv:
            keys = [self._heads(self.key1(source1))]
            values = [self._heads(value2(source2))]
        else:
            keys = [self._heads(self.key1(source1)), self._heads(key2(source2))]
            values = [self._heads(self.value1(source1)), self._heads(value2(source2))]
        weights, mixed = scaled_dot_attention(q, keys, values)
        mixed = mixed.reshape(target.shape[0], d)
        return Attention(weights, mixed, self.out_proj(mixed))

    def gate(self, target) -> Tensor:
        return self.gate_proj(as_tensor(target)).sigmoid()

    def injection(self, target, source1, source2, rng: np.random.Generator | None = None) -> Tensor:
        """Gated knowledge ``M_m`` for the target modality."""
        attended = self.cross_attend(target, source1, source2).output
        candidate = self.mlp(dropout(attended, self.config.dropout, self.training, rng))
        return self.gate(target) * candidate

    def forward(self, target, source1, source2, rng: np.random.Generator | None = None) -> Tensor:
        return inject(as_tensor(target), self.injection(target, source1, source2, rng))

    __call__ = forward


def inject(target: Tensor, m: Tensor) -> Tensor:
    """Residual fusion of the injected knowledge into the target code."""
    if target.shape != m.shape:
        raise ShapeError(f"inject: shapes differ {target.shape} vs {m.shape}")
    return target + m


def mse(y, y_hat: Tensor) -> Tensor:
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype)
    if y_hat.size == 0:
        raise ContractError("mean squared error over an empty batch")
    if y.shape != y_hat.shape:
        raise ShapeError(f"targets {y.shape} and predictions {y_hat.shape} differ")
    return (y_hat - y).square().mean()


class OutOfDomainBranch(Module):
    """Adapters (optional), fusion layer and the out-of-domain regression head."""

    def __init__(self, config: AdapterConfig, rng: np.random.Generator, use_adapter: bool = True):
        self.config = config
        self.use_adapter = use_adapter
        self.adapters = {m: ModalityAdapter(config, rng) for m in MODALITIES} if use_adapter else {}
        self.fuse_layer = Linear(3 * config.d_code, config.d_fuse, rng)
        self.head = MLP(config.d_fuse, config.d_hidden, 1, rng)

    def enhance(self, codes: dict[str, Tensor], rng: np.random.Generator | None = None) -> dict[str, Tensor]:
        """Knowledge-injected codes ``O_mi``; identity when adapters are ablated."""
        if not self.use_adapter:
            return dict(codes)
        out = {}
        for m in MODALITIES:
            s1, s2 = SOURCES[m]
            out[m] = self.adapters[m](codes[m], codes[s1], codes[s2], rng)
        return out

    def fuse(self, o_t, o_a, o_v) -> Tensor:
        parts = [as_tensor(x) for x in (o_t, o_a, o_v)]
        if any(p.shape[-1] != self.config.d_code for p in parts):
            raise ShapeError(f"fuse inputs must have length {self.config.d_code}: {[p.shape for p in parts]}")
        return self.fuse_layer(concat(parts, axis=-1)).relu()

    def predict_out(self, o) -> Tensor:
        o = as_tensor(o)
        if o.shape[-1] != self.config.d_fuse:
            raise ShapeError(f"fused vector must have length {self.config.d_fuse}, got {o.shape}")
        return self.head(o)[..., 0]

    def forward(self, codes: dict[str, Tensor], rng: np.random.Generator | None = None) -> Tensor:
        enhanced = self.enhance(codes, rng)
        return self.predict_out(self.fuse(enhanced["t"], enhanced["a"], enhanced["v"]))

    __call__ = forward


def loss_out(y, y_hat2: Tensor) -> Tensor:
    return mse(y, y_hat2)
