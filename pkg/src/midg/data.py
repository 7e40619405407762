"""Synthetic multimodal domain-shift data and the ``MIDG1`` text format.

File layout::

    MIDG1 d_t d_a d_v
    <id> <split> <domain> <label> <d_t + d_a + d_v reals>
    ...
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import keyed_rng

MAGIC = "MIDG1"
SPLITS = ("train", "valid", "test")
N_NUISANCE = 2


class DatasetError(ValueError):
    """Malformed or inconsistent dataset file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DatasetParseError(DatasetError):
    pass


class DatasetDimensionError(DatasetError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 1000
    dims: tuple[int, int, int] = (8, 4, 6)
    n_domains: int = 3
    domain_shift_scale: float = 1.0
    label_range: tuple[float, float] = (-3.0, 3.0)
    noise_std: float = 0.5
    seed: int = 0
    holdout_domains: tuple[int, ...] = ()
    valid_fraction: float = 0.15

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.n_domains < 1:
            raise ValueError(f"n_domains must be >= 1, got {self.n_domains}")
        lo, hi = self.label_range
        if not lo < hi:
            raise ValueError(f"label range needs lo < hi, got {self.label_range}")
        if self.domain_shift_scale < 0 or self.noise_std < 0:
            raise ValueError("domain_shift_scale and noise_std must be nonnegative")
        if any(not 0 <= d < self.n_domains for d in self.holdout_domains):
            raise ValueError(f"holdout domains {self.holdout_domains} outside [0, {self.n_domains})")


@dataclass
class Sample:
    id: str
    split: str
    domain: int
    label: float
    t: np.ndarray
    a: np.ndarray
    v: np.ndarray


@dataclass
class Dataset:
    dims: tuple[int, int, int]
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, split: str | None = None, domains=None) -> "Dataset":
        keep = [
            s
            for s in self.samples
            if (split is None or s.split == split) and (domains is None or s.domain in domains)
        ]
        return Dataset(self.dims, keep)

    def arrays(self, split: str | None = None) -> dict[str, np.ndarray]:
        """Stacked ``t, a, v, y, domain`` arrays (float64 features)."""
        rows = self.samples if split is None else [s for s in self.samples if s.split == split]
        out = {}
        for m, d in zip("tav", self.dims):
            out[m] = np.array([getattr(s, m) for s in rows], dtype=np.float64).reshape(len(rows), d)
        out["y"] = np.array([s.label for s in rows], dtype=np.float64)
        out["domain"] = np.array([s.domain for s in rows], dtype=np.int64)
        return out


def _domain_params(spec: SyntheticSpec):
    """Fixed per-seed mixing maps, per-domain shifts and noise distortions."""
    rng = keyed_rng(spec.seed, 0)
    mixing, shifts, distort = [], [], []
    for d_m in spec.dims:
        mixing.append(rng.normal(size=(d_m, 1 + N_NUISANCE)))
        shifts.append(spec.domain_shift_scale * rng.normal(size=(spec.n_domains, d_m)))
        g = rng.normal(size=(spec.n_domains, d_m, d_m)) / math.sqrt(d_m)
        distort.append(np.eye(d_m) + spec.domain_shift_scale * g)
    return mixing, shifts, distort


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset; every sample uses its own keyed random stream.

    Each modality vector is ``W_m [y_norm; z] + shift[domain] + R[domain] noise``
    where ``y_norm`` rescales the label to [-1, 1] and ``z`` is a standard
    normal nuisance vector.
    """
    lo, hi = spec.label_range
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    mixing, shifts, distort = _domain_params(spec)
    samples = []
    width = len(str(spec.n_samples - 1))
    for i in range(spec.n_samples):
        rng = keyed_rng(spec.seed, 1, i)
        domain = int(rng.integers(spec.n_domains))
        y = float(rng.uniform(lo, hi))
        z = rng.normal(size=N_NUISANCE)
        latent = np.concatenate([[(y - mid) / half], z])
        feats = []
        for m in range(3):
            noise = spec.noise_std * rng.normal(size=spec.dims[m])
            feats.append(mixing[m] @ latent + shifts[m][domain] + distort[m][domain] @ noise)
        if domain in spec.holdout_domains:
            split = "test"
        elif spec.holdout_domains:
            split = "valid" if rng.random() < spec.valid_fraction else "train"
        else:
            u = rng.random()
            split = "test" if u < spec.valid_fraction else "valid" if u < 2 * spec.valid_fraction else "train"
        samples.append(Sample(f"s{i:0{width}d}", split, domain, y, *feats))
    return Dataset(tuple(spec.dims), samples)


def format_dataset(dataset: Dataset) -> str:
    lines = [f"{MAGIC} {' '.join(str(d) for d in dataset.dims)}"]
    for s in dataset.samples:
        if not s.id or any(c.isspace() for c in s.id):
            raise DatasetError(f"sample id {s.id!r} must be nonempty without whitespace")
        if s.split not in SPLITS:
            raise DatasetError(f"sample {s.id}: unknown split {s.split!r}")
        for m, d in zip("tav", dataset.dims):
            if len(getattr(s, m)) != d:
                raise DatasetDimensionError(f"sample {s.id}: {m} has length {len(getattr(s, m))}, expected {d}")
        values = np.concatenate([s.t, s.a, s.v])
        lines.append(" ".join([s.id, s.split, str(s.domain), repr(float(s.label))] + [repr(float(x)) for x in values]))
    return "\n".join(lines) + "\n"


def write_dataset(dataset: Dataset, path) -> None:
    """Write atomically: the target only appears once fully written."""
    path = Path(path)
    text = format_dataset(dataset)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _float(token: str, what: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DatasetParseError(f"{what}: {token!r} is not a number", line) from None
    if not math.isfinite(value):
        raise DatasetParseError(f"{what}: non-finite value {token!r}", line)
    return value


def parse_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetParseError("empty file, expected header", 1)
    header = lines[0].split()
    if len(header) != 4 or header[0] != MAGIC:
        raise DatasetParseError(f"header must be '{MAGIC} d_t d_a d_v', got {lines[0]!r}", 1)
    try:
        dims = tuple(int(x) for x in header[1:])
    except ValueError:
        raise DatasetParseError(f"non-integer dimension in header {lines[0]!r}", 1) from None
    if min(dims) <= 0:
        raise DatasetParseError(f"dimensions must be positive, got {dims}", 1)
    n_values = sum(dims)
    samples = []
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) < 4:
            raise DatasetParseError(f"row needs 'id split domain label' before features, got {raw!r}", lineno)
        sid, split, domain_tok, label_tok = tokens[:4]
        if split not in SPLITS:
            raise DatasetParseError(f"sample {sid}: unknown split {split!r}", lineno)
        try:
            domain = int(domain_tok)
        except ValueError:
            raise DatasetParseError(f"sample {sid}: domain {domain_tok!r} is not an integer", lineno) from None
        label = _float(label_tok, f"sample {sid} label", lineno)
        values = np.array([_float(tok, f"sample {sid} feature", lineno) for tok in tokens[4:]])
        if len(values) != n_values:
            raise DatasetDimensionError(
                f"sample {sid}: {len(values)} feature values, header dims {dims} need {n_values}", lineno
            )
        t, a, v = np.split(values, np.cumsum(dims)[:-1])
        samples.append(Sample(sid, split, domain, label, t, a, v))
    return Dataset(dims, samples)


def read_dataset(path) -> Dataset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"file is not UTF-8 text: {exc}") from None
    return parse_dataset(text)
