"""Shared recommender interface and training loop."""

from __future__ import annotations

import copy
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .data import Vocabulary
from .features import Batch
from .nn import Adam, check_finite
from .sessionize import TaskInstance


class Recommender(ABC):
    """Scores every catalog item for a task; higher means more recommended."""

    name = "recommender"

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def fit(self, train: Sequence[TaskInstance], val: Sequence[TaskInstance] | None = None) -> "Recommender":
        return self

    @abstractmethod
    def score(self, tasks: Sequence[TaskInstance]) -> np.ndarray:
        """(n_tasks, K) array of scores."""

    def get_state(self) -> tuple[dict[str, np.ndarray], dict]:
        return {}, {}

    def set_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        pass


class Network(Protocol):
    params: dict[str, np.ndarray]

    def loss(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None) -> float: ...

    def loss_and_grads(self, batch: Batch, rng: np.random.Generator | None = None, train: bool = True): ...


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def batch(self, idx) -> Batch: ...


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "best_epoch": self.best_epoch}


def mean_loss(net: Network, data: Dataset, batch_size: int = 256) -> float:
    n = len(data)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        total += net.loss(data.batch(idx), train=False)
    return total / n


def fit_network(
    net: Network,
    train: Dataset,
    val: Dataset,
    batch_size: int = 32,
    max_epochs: int = 50,
    patience: int = 1,
    lr: float = 1e-3,
    seed: int = 0,
) -> History:
    """Mini-batch Adam with early stopping on validation loss.

    Keeps the parameters of the epoch with the lowest validation loss and
    stops after `patience` epochs without improvement.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng([seed, 1])
    opt = Adam(lr=lr)
    hist = History()
    best = float("inf")
    best_params = copy.deepcopy(net.params)
    bad = 0
    n = len(train)
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = net.loss_and_grads(train.batch(idx), rng=rng, train=True)
            scale = 1.0 / len(idx)
            grads = {k: g * scale for k, g in grads.items()}
            check_finite(grads)
            opt.step(net.params, grads)
            running += loss
        hist.train_loss.append(running / n)
        v = mean_loss(net, val)
        hist.val_loss.append(v)
        if v < best:
            best, bad = v, 0
            best_params = copy.deepcopy(net.params)
            hist.best_epoch = epoch
        else:
            bad += 1
            if bad >= patience:
                break
    for k in net.params:
        net.params[k][...] = best_params[k]
    return hist


def rank_items(scores: np.ndarray) -> np.ndarray:
    """Item indices by decreasing score; ties go to the lower index."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")
