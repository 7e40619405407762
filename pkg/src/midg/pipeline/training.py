"""Minibatch training, evaluation and the module ablation grid."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..autodiff import Adam, keyed_rng
from ..data import Dataset
from ..moie import grl_schedule
from .metrics import MetricsReport, compute_metrics
from .model import MIDG, DataError, ModelConfig, TrainConfig, TrainingError, total_loss

log = logging.getLogger(__name__)

COMPONENTS = ("l_dis", "l_in", "l_out", "l_reg")


@dataclass
class TrainResult:
    model: MIDG
    history: list[dict] = field(default_factory=list)

    def jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.history)


def effective_train_config(model_config: ModelConfig, train: TrainConfig) -> TrainConfig:
    # no expert mixture means no discriminator, hence no domain loss
    return train if model_config.use_moie else replace(train, alpha=0.0)


def train(dataset: Dataset, model_config: ModelConfig, config: TrainConfig, split: str = "train") -> TrainResult:
    data = dataset.arrays(split)
    n = len(data["y"])
    if n == 0:
        raise DataError(f"dataset has no '{split}' samples")
    if tuple(dataset.dims) != tuple(model_config.dims):
        raise DataError(f"dataset dims {dataset.dims} do not match model dims {model_config.dims}")
    config = effective_train_config(model_config, config)
    model = MIDG(model_config, seed=config.seed)
    model.train()
    opt = Adam(model.parameters(), lr=config.lr)
    result = TrainResult(model)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    step = 0
    for epoch in range(config.epochs):
        order = keyed_rng(config.seed, 2, epoch).permutation(n)
        sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = {m: data[m][idx] for m in "tav"}
            lam = model_config.grl_lambda
            if config.grl_warmup:
                lam *= grl_schedule(step / total_steps)
            out = model.forward_train(batch, data["y"][idx], config, keyed_rng(config.seed, 4, step), lam=lam)
            for name, value in out.components.items():
                if not np.isfinite(value.data).all():
                    raise TrainingError(f"epoch {epoch} step {step}: {name} became non-finite")
            loss = total_loss(out.components, config.alpha, config.beta, config.gamma, config.delta)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for name in COMPONENTS:
                sums[name] += out.components[name].item() * len(idx)
            sums["total"] += loss.item() * len(idx)
            step += 1
        record = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        log.debug("epoch %d total %.4f", epoch, record["total"])
        result.history.append(record)
    model.eval()
    return result


def evaluate(model: MIDG, dataset: Dataset, split: str | None = "test", mode: str = "test", w1=0.5, w2=0.5) -> MetricsReport:
    data = dataset.arrays(split)
    if len(data["y"]) == 0:
        raise DataError(f"no samples in split {split!r}")
    pred = model.predict(data, mode=mode, w1=w1, w2=w2)
    return compute_metrics(data["y"], pred.combined)


ABLATIONS = (
    (False, False),
    (True, False),
    (False, True),
    (True, True),
)


def ablate(
    dataset: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    switches=ABLATIONS,
    eval_split: str = "test",
) -> list[dict]:
    """Train and evaluate one model per (use_moie, use_adapter) setting."""
    rows = []
    for use_moie, use_adapter in switches:
        mc = replace(model_config, use_moie=use_moie, use_adapter=use_adapter)
        result = train(dataset, mc, config)
        report = evaluate(result.model, dataset, eval_split)
        rows.append(
            {
                "moie": use_moie,
                "adapter": use_adapter,
                "n_params": result.model.num_parameters(),
                **report.to_dict(),
            }
        )
    return rows
