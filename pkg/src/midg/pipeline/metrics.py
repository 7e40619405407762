from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricsReport:
    acc: float
    f1: float
    mae: float
    corr: float
    n: int
    corr_undefined: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.corr_undefined:
            d.pop("corr_undefined")
        return d


def compute_metrics(y_true, y_pred) -> MetricsReport:
    """Binary ACC/F1 by sign (zero counts as positive), MAE and Pearson r.

    Pearson r is reported as 0 with ``corr_undefined`` set when either side
    has zero variance.
    """
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y.size == 0 or y.shape != p.shape:
        raise ValueError(f"need equal nonempty label/prediction arrays, got {y.shape} and {p.shape}")
    pos_true, pos_pred = y >= 0, p >= 0
    acc = float(np.mean(pos_true == pos_pred))
    tp = int(np.sum(pos_true & pos_pred))
    fp = int(np.sum(~pos_true & pos_pred))
    fn = int(np.sum(pos_true & ~pos_pred))
    f1 = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    mae = float(np.mean(np.abs(y - p)))

    yc, pc = y - y.mean(), p - p.mean()
    denom = np.sqrt(np.sum(yc * yc) * np.sum(pc * pc))
    if denom == 0 or not np.isfinite(denom):
        corr, undefined = 0.0, True
    else:
        corr, undefined = float(np.clip(np.sum(yc * pc) / denom, -1.0, 1.0)), False
    return MetricsReport(acc, float(f1), mae, corr, int(y.size), undefined)
