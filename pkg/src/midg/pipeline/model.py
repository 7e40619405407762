"""The two-branch model: disentangling encoders feed an in-domain expert
mixture and an out-of-domain cross-modal adapter."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..autodiff import Module, Tensor, concat, keyed_rng
from ..cm_adapter import MODALITIES, AdapterConfig, OutOfDomainBranch, mse
from ..disentangle import DisentangleConfig, Disentangler
from ..moie import FusionNet, MoIE, MoIEConfig


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, int, int] = (8, 4, 6)
    d_code: int = 8
    enc_hidden: int = 32
    n_experts: int = 4
    moie_hidden: int = 32
    d_repr: int = 16
    grl_lambda: float = 1.0
    heads: int = 4
    dropout: float = 0.1
    adapter_hidden: int = 16
    d_fuse: int = 16
    use_moie: bool = True
    use_adapter: bool = True
    literal_kv: bool = False

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        sizes = (self.d_code, self.enc_hidden, self.n_experts, self.moie_hidden, self.d_repr)
        if min(sizes + (self.heads, self.adapter_hidden, self.d_fuse)) <= 0:
            raise ValueError(f"all layer sizes must be positive: {self}")
        if self.d_code % self.heads:
            raise ValueError(f"d_code={self.d_code} must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.grl_lambda < 0:
            raise ValueError(f"grl_lambda must be nonnegative, got {self.grl_lambda}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "dims" in d:
            d["dims"] = tuple(int(x) for x in d["dims"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 0.01
    delta: float = 1.0
    w1: float = 0.5
    w2: float = 0.5
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    label_range: tuple[float, float] = (-3.0, 3.0)
    grl_warmup: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "w1", "w2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not math.isclose(self.w1 + self.w2, 1.0, abs_tol=1e-12):
            raise ValueError(f"fusion weights must sum to 1, got {self.w1} + {self.w2}")
        lo, hi = self.label_range
        if not lo < hi:
            raise ValueError(f"label range needs lo < hi, got {self.label_range}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")


@dataclass
class Prediction:
    y1: np.ndarray | None
    y2: np.ndarray
    combined: np.ndarray


@dataclass
class TrainOutputs:
    y1: Tensor
    y2: Tensor
    combined: Tensor
    components: dict[str, Tensor] = field(default_factory=dict)


def total_loss(components, alpha=0.1, beta=1.0, gamma=0.01, delta=1.0):
    """``alpha*l_in + beta*l_out + gamma*l_dis + delta*l_reg``.

    Works on tensors or plain floats; with gamma = delta = 0 only the domain
    and out-of-domain terms remain.
    """
    return (
        components["l_in"] * alpha
        + components["l_out"] * beta
        + components["l_dis"] * gamma
        + components["l_reg"] * delta
    )


@contextlib.contextmanager
def evaluating(module: Module):
    saved = [(m, m.training) for m in module.modules()]
    module.eval()
    try:
        yield module
    finally:
        for m, mode in saved:
            m.training = mode


class MIDG(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = keyed_rng(seed, 3)
        c = config
        self.disentanglers = {
            m: Disentangler(DisentangleConfig(d_m, c.d_code, c.enc_hidden), rng) for m, d_m in zip(MODALITIES, c.dims)
        }
        moie_config = MoIEConfig(3 * c.d_code, c.n_experts, c.moie_hidden, c.d_repr, c.grl_lambda)
        self.in_branch = MoIE(moie_config, rng) if c.use_moie else FusionNet(moie_config, rng)
        adapter_config = AdapterConfig(
            c.d_code, c.heads, c.dropout, c.adapter_hidden, c.d_fuse, literal_kv=c.literal_kv
        )
        self.out_branch = OutOfDomainBranch(adapter_config, rng, use_adapter=c.use_adapter)

    @property
    def dtype(self) -> np.dtype:
        return self.parameters()[0].dtype

    def in_domain_parameters(self) -> list[Tensor]:
        """Everything the test-time path must not depend on."""
        params = list(self.in_branch.parameters())
        for d in self.disentanglers.values():
            params.extend(d.in_encoder.parameters())
        return params

    def _inputs(self, features: dict[str, np.ndarray]) -> dict[str, Tensor]:
        out = {}
        for m, d_m in zip(MODALITIES, self.config.dims):
            x = np.asarray(features[m])
            if x.ndim != 2 or x.shape[1] != d_m:
                raise DataError(f"modality {m}: expected (N, {d_m}) features, got {x.shape}")
            out[m] = Tensor(x, dtype=self.dtype)
        return out

    def forward_train(
        self,
        features: dict[str, np.ndarray],
        labels,
        train: TrainConfig,
        rng: np.random.Generator,
        lam: float | None = None,
    ) -> TrainOutputs:
        """One stochastic forward pass over a batch with all loss components."""
        y = np.asarray(labels, dtype=np.float64)
        if y.size == 0:
            raise DataError("empty batch")
        lo, hi = train.label_range
        bad = np.flatnonzero((y < lo) | (y > hi) | ~np.isfinite(y))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"sample {i}: label {y[i]} outside [{lo}, {hi}]")
        x = self._inputs(features)
        n, d = len(y), self.config.d_code

        in_codes, out_codes, l_dis = {}, {}, None
        for m in MODALITIES:
            dis = self.disentanglers[m]
            noise_in = rng.standard_normal((n, d)).astype(self.dtype)
            noise_out = rng.standard_normal((n, d)).astype(self.dtype)
            pair = dis(x[m], noise_in, noise_out)
            term = dis.loss_dis(x[m], pair)
            l_dis = term if l_dis is None else l_dis + term
            in_codes[m], out_codes[m] = pair.in_sample, pair.out_sample

        fused_in = concat([in_codes[m] for m in MODALITIES], axis=-1)
        h_in = self.in_branch(fused_in)
        y1 = self.in_branch.predict_in(h_in)
        if self.config.use_moie:
            fused_out = concat([out_codes[m] for m in MODALITIES], axis=-1)
            h_both = concat([h_in, self.in_branch(fused_out)], axis=0)
            # pseudo-domain label: 0 for in-domain codes, 1 for out-of-domain codes
            domain = np.concatenate([np.zeros(n), np.ones(n)])
            l_in = self.in_branch.loss_in(None, domain, lam=lam, h=h_both)
        else:
            l_in = Tensor(0.0, dtype=self.dtype)

        y2 = self.out_branch(out_codes, rng)
        combined = y1 * train.w1 + y2 * train.w2
        y_t = y.astype(self.dtype)
        components = {"l_dis": l_dis, "l_in": l_in, "l_out": mse(y_t, y2), "l_reg": mse(y_t, combined)}
        return TrainOutputs(y1, y2, combined, components)

    def predict(self, features: dict[str, np.ndarray], mode: str = "test", w1: float = 0.5, w2: float = 0.5) -> Prediction:
        """Deterministic prediction with codes at their posterior means.

        ``test`` runs only the out-of-domain path (out-encoders, adapters,
        head); ``train-fusion`` also runs the in-domain branch and returns the
        weighted combination.
        """
        if mode not in ("test", "train-fusion"):
            raise ValueError(f"mode must be 'test' or 'train-fusion', got {mode!r}")
        x = self._inputs(features)
        with evaluating(self):
            out_codes = {m: self.disentanglers[m].encode(x[m], "out").mean for m in MODALITIES}
            y2 = self.out_branch(out_codes).data.astype(np.float64)
            if mode == "test":
                return Prediction(None, y2, y2.copy())
            in_codes = [self.disentanglers[m].encode(x[m], "in").mean for m in MODALITIES]
            y1 = self.in_branch.predict_in(self.in_branch(concat(in_codes, axis=-1))).data.astype(np.float64)
        return Prediction(y1, y2, w1 * y1 + w2 * y2)
