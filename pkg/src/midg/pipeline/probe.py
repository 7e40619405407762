"""Domain probes and a stand-alone adversarial run of the expert mixture.

A probe is a fresh classifier fitted to predict the domain from some
representation; its held-out accuracy measures how much domain information
the representation still carries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import MLP, Adam, Linear, Module, Tensor, keyed_rng, softmax
from ..cm_adapter import mse
from ..data import Dataset
from ..moie import MoIE, MoIEConfig

PROB_FLOOR = 1e-12


class _Classifier(Module):
    def __init__(self, d_in: int, n_classes: int, hidden: int, rng):
        self.net = MLP(d_in, hidden, n_classes, rng) if hidden else Linear(d_in, n_classes, rng)

    def __call__(self, x):
        return self.net(x)


def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return [(x - mu) / sd for x in (train, *others)]


def probe_accuracy(
    x_train,
    d_train,
    x_test,
    d_test,
    hidden: int = 0,
    steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
) -> float:
    """Held-out accuracy of a classifier trained to recover ``d`` from ``x``.

    ``hidden = 0`` gives multinomial logistic regression; otherwise a
    one-hidden-layer ReLU network. Full-batch Adam on the standardized inputs.
    """
    x_train, x_test = _standardize(np.asarray(x_train, float), np.asarray(x_test, float))
    d_train, d_test = np.asarray(d_train, int), np.asarray(d_test, int)
    classes = np.unique(d_train)
    index = {c: i for i, c in enumerate(classes)}
    target = np.zeros((len(d_train), len(classes)))
    target[np.arange(len(d_train)), [index[c] for c in d_train]] = 1.0

    model = _Classifier(x_train.shape[1], len(classes), hidden, keyed_rng(seed, 21))
    opt = Adam(model.parameters(), lr=lr)
    x = Tensor(x_train)
    for _ in range(steps):
        probs = softmax(model(x), axis=-1).clip(PROB_FLOOR, 1.0)
        loss = -(probs.log() * target).sum(axis=-1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    predicted = classes[np.argmax(model(Tensor(x_test)).data, axis=-1)]
    return float(np.mean(predicted == d_test))


def fused_inputs(dataset: Dataset, split: str | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = dataset.arrays(split)
    return np.concatenate([a["t"], a["a"], a["v"]], axis=1), a["y"], a["domain"]


@dataclass
class AdversarialRun:
    moie: MoIE
    history: list[dict]

    def represent(self, x: np.ndarray) -> np.ndarray:
        return self.moie(Tensor(x)).data.astype(np.float64)


def train_moie_adversarial(
    x: np.ndarray,
    y: np.ndarray,
    domains: np.ndarray,
    config: MoIEConfig | None = None,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
    alpha: float = 1.0,
    seed: int = 0,
) -> AdversarialRun:
    """Fit the mixture with a sentiment head plus the reversed domain loss.

    The objective is ``mse(y, head(h)) + alpha * loss_in`` with the true
    domain labels (0/1), so the experts keep label information while the
    reversal strips domain information.
    """
    domains = np.asarray(domains)
    if set(np.unique(domains)) - {0, 1}:
        raise ValueError(f"adversarial run needs binary domain labels, got {np.unique(domains)}")
    x = np.asarray(x, np.float64)
    config = config or MoIEConfig(x.shape[1])
    moie = MoIE(config, keyed_rng(seed, 22))
    opt = Adam(moie.parameters(), lr=lr)
    history = []
    n = len(y)
    for epoch in range(epochs):
        order = keyed_rng(seed, 23, epoch).permutation(n)
        sums = np.zeros(2)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            h = moie(Tensor(x[idx]))
            l_task = mse(y[idx], moie.predict_in(h))
            l_dom = moie.loss_in(None, domains[idx], h=h)
            opt.zero_grad()
            (l_task + l_dom * alpha).backward()
            opt.step()
            sums += np.array([l_task.item(), l_dom.item()]) * len(idx)
        history.append({"epoch": epoch, "l_task": sums[0] / n, "l_in": sums[1] / n})
    return AdversarialRun(moie, history)
