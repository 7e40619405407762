"""Central finite-difference checks against the analytic backward pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import AutodiffError, Tensor, default_dtype


class NumericError(AutodiffError, ArithmeticError):
    pass


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def _scalar(value: Tensor) -> float:
    out = float(value.data.reshape(-1)[0]) if value.size == 1 else float("nan")
    if value.size != 1 or not np.isfinite(out):
        raise NumericError(f"function returned non-finite or non-scalar value ({value.shape})")
    return out


def gradcheck(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-4) -> float:
    """Max relative error between ``backward`` and central differences of ``fn`` at ``point``.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Evaluation happens in float64 regardless of the ambient default dtype.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    with default_dtype(np.float64):
        x0 = np.array(point, dtype=np.float64)
        x = Tensor(x0.copy(), requires_grad=True)
        out = fn(x)
        _scalar(out)
        out.backward()
        analytic = x.grad.copy()

        numeric = np.zeros_like(x0)
        flat = numeric.reshape(-1)
        for i in range(x0.size):
            plus = x0.copy().reshape(-1)
            minus = x0.copy().reshape(-1)
            plus[i] += eps
            minus[i] -= eps
            f_plus = _scalar(fn(Tensor(plus.reshape(x0.shape))))
            f_minus = _scalar(fn(Tensor(minus.reshape(x0.shape))))
            flat[i] = (f_plus - f_minus) / (2 * eps)
    return _relative_error(analytic, numeric)


def gradcheck_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`gradcheck` but perturbs parameter tensors in place.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    With ``max_coords`` set, a random subset of coordinates per parameter is
    checked.
    """
    for p in params:
        if p.dtype != np.float64:
            raise NumericError("gradcheck_params needs float64 parameters")
        p.zero_grad()
    loss = loss_fn()
    _scalar(loss)
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        coords, numeric = numeric_param_grad(loss_fn, p, eps, max_coords, rng)
        worst = max(worst, _relative_error(a.reshape(-1)[coords], numeric))
    for p in params:
        p.zero_grad()
    return worst


def numeric_param_grad(
    loss_fn: Callable[[], Tensor],
    p: Tensor,
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. (a subset of) ``p``'s flat coordinates."""
    flat = p.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
    numeric = np.empty(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _scalar(loss_fn())
        flat[i] = orig - eps
        f_minus = _scalar(loss_fn())
        flat[i] = orig
        numeric[j] = (f_plus - f_minus) / (2 * eps)
    return coords, numeric
