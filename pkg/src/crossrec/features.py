"""Turning tasks into arrays: session encodings, padded batches, targets, demographics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Session, Vocabulary
from .sessionize import TaskInstance


def session_matrix(session: Session, vocab: Vocabulary) -> np.ndarray:
    return vocab.binarize(session.actions)


def encode_session_maxpool(session: Session, vocab: Vocabulary) -> np.ndarray:
    """Element-wise max (logical OR) of the binarized actions of a session."""
    if not session.actions:
        raise ValueError("cannot encode an empty session")
    return session_matrix(session, vocab).max(axis=0)


def encode_tasks(tasks: Sequence[TaskInstance], vocab: Vocabulary) -> list[np.ndarray]:
    """Per task, one max-pooled vector per session in chronological order: (m, D)."""
    return [
        np.stack([encode_session_maxpool(s, vocab) for s in t.sessions]) if t.sessions else np.zeros((0, vocab.dim))
        for t in tasks
    ]


def concat_tasks(tasks: Sequence[TaskInstance], vocab: Vocabulary) -> list[np.ndarray]:
    """Per task, all binarized actions of all sessions as one sequence: (sum n_i, D)."""
    return [
        np.concatenate([session_matrix(s, vocab) for s in t.sessions]) if t.sessions else np.zeros((0, vocab.dim))
        for t in tasks
    ]


def pooled_task_vectors(tasks: Sequence[TaskInstance], vocab: Vocabulary) -> np.ndarray:
    """Max pool over every action of every recent session: (n_tasks, D)."""
    out = np.zeros((len(tasks), vocab.dim))
    for i, t in enumerate(tasks):
        for s in t.sessions:
            codes = vocab.action_codes(s.actions)
            out[i, codes.ravel()] = 1.0
    return out


def target_matrix(tasks: Sequence[TaskInstance], vocab: Vocabulary) -> np.ndarray:
    return np.stack([vocab.items_vector(t.items) for t in tasks]) if tasks else np.zeros((0, vocab.K))


def portfolio_matrix(tasks: Sequence[TaskInstance], vocab: Vocabulary) -> np.ndarray:
    out = np.zeros((len(tasks), vocab.K))
    for i, t in enumerate(tasks):
        for item, n in t.portfolio.items():
            if vocab.has_item(item):
                out[i, vocab.item_index(item)] = n
    return out


def raw_demographics(tasks: Sequence[TaskInstance]) -> np.ndarray:
    widths = {len(t.demographics) for t in tasks}
    if len(widths) > 1:
        raise ValueError(f"inconsistent demographic vector lengths {sorted(widths)}")
    width = widths.pop() if widths else 0
    return np.array([t.demographics for t in tasks], dtype=float).reshape(len(tasks), width)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        sd = X.std(axis=0) if len(X) else np.ones(X.shape[1])
        return cls(X.mean(axis=0) if len(X) else np.zeros(X.shape[1]), np.where(sd > 0, sd, 1.0))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


def demographic_features(tasks: Sequence[TaskInstance], vocab: Vocabulary, standardizer: Standardizer | None = None):
    """[standardized demographics | missing flag | portfolio counts]."""
    demo = raw_demographics(tasks)
    if standardizer is not None:
        demo = standardizer(demo)
    missing = np.array([[float(t.demographics_missing)] for t in tasks]).reshape(len(tasks), 1)
    return np.hstack([demo, missing, portfolio_matrix(tasks, vocab)])


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    X: np.ndarray  # (B, T, D)
    mask: np.ndarray  # (B, T)
    y: np.ndarray | None = None  # (B, K) multi-label targets
    demo: np.ndarray | None = None  # (B, F)
    targets: np.ndarray | None = None  # (B, T) or (B, T, 3) integer targets
    weights: np.ndarray | None = None  # (B, T) loss weights for integer targets

    def __len__(self):
        return self.X.shape[0]


def pad(seqs: Sequence[np.ndarray], dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence (at least one step; empty sequences stay fully masked)."""
    T = max([1] + [len(s) for s in seqs])
    X = np.zeros((len(seqs), T, dim))
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        X[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return X, mask


@dataclass
class SequenceData:
    """Variable-length input sequences with optional multi-label targets and demographics."""

    seqs: list[np.ndarray]
    dim: int
    y: np.ndarray | None = None
    demo: np.ndarray | None = None

    def __len__(self):
        return len(self.seqs)

    def batch(self, idx) -> Batch:
        X, mask = pad([self.seqs[i] for i in idx], self.dim)
        return Batch(
            X,
            mask,
            None if self.y is None else self.y[idx],
            None if self.demo is None else self.demo[idx],
        )


@dataclass
class TabularData:
    X: np.ndarray
    y: np.ndarray | None = None

    def __len__(self):
        return len(self.X)

    def batch(self, idx) -> Batch:
        return Batch(self.X[idx][:, None, :], np.ones((len(idx), 1)), None if self.y is None else self.y[idx], demo=self.X[idx])


@dataclass
class TokenData:
    """Sequences of input vectors with per-step integer targets (next action or reconstruction)."""

    seqs: list[np.ndarray]
    targets: list[np.ndarray]  # (len_i,) or (len_i, 3)
    weights: list[np.ndarray]  # (len_i,)
    dim: int

    def __len__(self):
        return len(self.seqs)

    def batch(self, idx) -> Batch:
        X, mask = pad([self.seqs[i] for i in idx], self.dim)
        T = X.shape[1]
        tail = self.targets[idx[0]].shape[1:] if len(idx) else ()
        tg = np.zeros((len(idx), T) + tail, dtype=np.int64)
        w = np.zeros((len(idx), T))
        for j, i in enumerate(idx):
            n = len(self.seqs[i])
            tg[j, :n] = self.targets[i]
            w[j, :n] = self.weights[i]
        return Batch(X, mask, targets=tg, weights=w)
