"""Comparison recommenders: Random, Popular, SVD, Demographic, GRU4REC (+Concat), SKNN_E/EB."""

from __future__ import annotations

import zlib

import numpy as np
from scipy.special import expit, softmax

from .base import History, Recommender, fit_network
from .features import (
    Batch,
    Standardizer,
    TabularData,
    TokenData,
    demographic_features,
    pooled_task_vectors,
    portfolio_matrix,
    raw_demographics,
    session_matrix,
    target_matrix,
    pad,
)
from .models import TABLE3, FeedForwardNet, NextActionNet
from .nn import prefixed, sub
from .sessionize import TaskInstance


def _task_key(t: TaskInstance) -> int:
    return zlib.crc32(f"{t.user_id}|{t.timestamp}".encode())


class RandomRecommender(Recommender):
    name = "random"

    def __init__(self, vocab, seed: int = 0):
        super().__init__(vocab)
        self.seed = seed

    def score(self, tasks):
        # seeded per task, so scores do not depend on task order
        return np.stack([np.random.default_rng([self.seed, _task_key(t)]).random(self.vocab.K) for t in tasks]).reshape(
            len(tasks), self.vocab.K
        )

    def get_state(self):
        return {}, {"seed": self.seed}

    def set_state(self, arrays, meta):
        self.seed = meta["seed"]


class PopularRecommender(Recommender):
    """Training purchase counts per item; ties rank by item index."""

    name = "popular"

    def __init__(self, vocab):
        super().__init__(vocab)
        self.counts: np.ndarray | None = None

    def fit(self, train, val=None):
        if not train:
            raise ValueError("popular: empty training set")
        self.counts = target_matrix(train, self.vocab).sum(axis=0)
        return self

    def score(self, tasks):
        return np.tile(self.counts, (len(tasks), 1))

    def get_state(self):
        return {"counts": self.counts}, {}

    def set_state(self, arrays, meta):
        self.counts = arrays["counts"]


def repeat_columns(counts: np.ndarray, copies: int) -> np.ndarray:
    """Binary user x (copy, item) matrix: column j*K + k is 1 if the user owns > j copies of item k."""
    return np.concatenate([(counts > j).astype(float) for j in range(copies)], axis=1)


class SVDRecommender(Recommender):
    """Truncated SVD of the portfolio matrix, repeated purchases as extra columns.

    A user's scores are the rank-`factors` reconstruction of their row,
    folded back to base items by max over the copy columns.
    """

    name = "svd"

    def __init__(self, vocab, factors: int = 1, fold: str = "max"):
        super().__init__(vocab)
        if fold not in ("max", "next"):
            raise ValueError("fold must be 'max' or 'next'")
        self.factors = factors
        self.fold = fold
        self.V: np.ndarray | None = None
        self.copies = 1

    def fit(self, train, val=None):
        seen, rows = set(), []
        for t in train:
            if t.user_id not in seen:
                seen.add(t.user_id)
                rows.append(t)
        counts = portfolio_matrix(rows, self.vocab)
        self.copies = int(counts.max()) + 1 if counts.size else 1
        A = repeat_columns(counts, self.copies)
        if not A.any():
            raise ValueError("svd: portfolio matrix is all zero")
        _, _, vt = np.linalg.svd(A, full_matrices=False)
        self.V = vt[: self.factors].T
        return self

    def reconstruct(self, counts: np.ndarray) -> np.ndarray:
        A = repeat_columns(counts, self.copies)
        return (A @ self.V) @ self.V.T

    def score(self, tasks):
        counts = portfolio_matrix(tasks, self.vocab)
        R = self.reconstruct(counts).reshape(len(tasks), self.copies, self.vocab.K)
        if self.fold == "max":
            return R.max(axis=1)
        nxt = np.minimum(counts, self.copies - 1).astype(int)
        return np.take_along_axis(R, nxt[:, None, :], axis=1)[:, 0]

    def get_state(self):
        return {"V": self.V}, {"factors": self.factors, "fold": self.fold, "copies": self.copies}

    def set_state(self, arrays, meta):
        self.V = arrays["V"]
        self.factors, self.fold, self.copies = meta["factors"], meta["fold"], meta["copies"]


class DemographicRecommender(Recommender):
    """Feed-forward classifier on [demographics | portfolio counts]."""

    name = "demographic"

    def __init__(self, vocab, units=None, batch_size=None, dropout=None, max_epochs=50, patience=1, lr=1e-3, seed=0):
        super().__init__(vocab)
        bs, u, d = TABLE3["demographic"]
        self.units = units or u
        self.batch_size = batch_size or bs
        self.dropout = d if dropout is None else dropout
        self.max_epochs, self.patience, self.lr, self.seed = max_epochs, patience, lr, seed
        self.net: FeedForwardNet | None = None
        self.standardizer: Standardizer | None = None
        self.history = History()

    def features(self, tasks):
        return demographic_features(tasks, self.vocab, self.standardizer)

    def fit(self, train, val=None):
        if not train or not val:
            raise ValueError("demographic: train and validation tasks required")
        self.standardizer = Standardizer.fit(raw_demographics(train))
        tr = TabularData(self.features(train), target_matrix(train, self.vocab))
        va = TabularData(self.features(val), target_matrix(val, self.vocab))
        self.net = FeedForwardNet(tr.X.shape[1], self.vocab.K, self.units, self.dropout, self.seed)
        self.history = fit_network(self.net, tr, va, self.batch_size, self.max_epochs, self.patience, self.lr, self.seed)
        return self

    def score(self, tasks):
        X = self.features(tasks)
        if X.shape[1] != self.net.params["l1.W"].shape[1]:
            raise ValueError(f"feature length {X.shape[1]} does not match the fitted model")
        return expit(self.net.logits(TabularData(X).batch(np.arange(len(tasks)))))

    def get_state(self):
        arrays = prefixed("net", self.net.params)
        arrays["std.mean"], arrays["std.scale"] = self.standardizer.mean, self.standardizer.scale
        return arrays, {"units": self.units, "dropout": self.dropout, "history": self.history.to_dict()}

    def set_state(self, arrays, meta):
        p = sub(arrays, "net")
        self.units, self.dropout = meta["units"], meta["dropout"]
        self.net = FeedForwardNet(p["l1.W"].shape[1], self.vocab.K, self.units, self.dropout)
        self.net.params = p
        self.standardizer = Standardizer(arrays["std.mean"], arrays["std.scale"])


class GRU4RecRecommender(Recommender):
    """Next-action GRU trained with categorical cross-entropy.

    Input is the user's last session, or all recent sessions flattened when
    ``concat=True``. An item's score is the max (or sum) of the predicted
    next-action probabilities over actions whose object is that item.
    """

    def __init__(self, vocab, concat=False, units=None, batch_size=None, dropout=None, item_agg="max",
                 max_epochs=50, patience=1, lr=1e-3, seed=0):
        super().__init__(vocab)
        bs, u, d = TABLE3["gru4rec-concat" if concat else "gru4rec"]
        if item_agg not in ("max", "sum"):
            raise ValueError("item_agg must be 'max' or 'sum'")
        self.concat = concat
        self.units = units or u
        self.batch_size = batch_size or bs
        self.dropout = d if dropout is None else dropout
        self.item_agg = item_agg
        self.max_epochs, self.patience, self.lr, self.seed = max_epochs, patience, lr, seed
        self.actions: np.ndarray | None = None  # (A, 3) binarized positions of each action id
        self.net: NextActionNet | None = None
        self.history = History()

    @property
    def name(self):
        return "gru4rec-concat" if self.concat else "gru4rec"

    def _sessions(self, t: TaskInstance):
        return t.sessions if self.concat else t.sessions[-1:]

    def _matrices(self, tasks):
        return [
            np.concatenate([session_matrix(s, self.vocab) for s in self._sessions(t)])
            if t.sessions else np.zeros((0, self.vocab.dim))
            for t in tasks
        ]

    def _codes(self, t):
        return [self.vocab.action_codes(s.actions) for s in self._sessions(t)]

    def _token_data(self, tasks) -> TokenData:
        index = {tuple(c): i for i, c in enumerate(self.actions)}
        seqs, targets, weights = [], [], []
        for t, mat in zip(tasks, self._matrices(tasks)):
            codes = np.concatenate(self._codes(t)) if t.sessions else np.zeros((0, 3), dtype=np.int64)
            ids = np.array([index.get(tuple(c), -1) for c in codes], dtype=np.int64)
            tg = np.zeros(len(ids), dtype=np.int64)
            w = np.zeros(len(ids))
            if len(ids) > 1:
                nxt = ids[1:]
                tg[:-1] = np.maximum(nxt, 0)
                w[:-1] = nxt >= 0
            seqs.append(mat)
            targets.append(tg)
            weights.append(w)
        return TokenData(seqs, targets, weights, self.vocab.dim)

    def fit(self, train, val=None):
        if not train or not val:
            raise ValueError("gru4rec: train and validation tasks required")
        seen = {}
        for t in train:
            for c in self._codes(t):
                for row in c:
                    seen.setdefault(tuple(int(x) for x in row), None)
        self.actions = np.array(sorted(seen), dtype=np.int64).reshape(-1, 3)
        self.net = NextActionNet(self.vocab.dim, len(self.actions), self.units, None, self.dropout, self.seed)
        self.history = fit_network(
            self.net, self._token_data(train), self._token_data(val),
            self.batch_size, self.max_epochs, self.patience, self.lr, self.seed,
        )
        return self

    def next_action_proba(self, tasks, batch_size=512) -> np.ndarray:
        mats = self._matrices(tasks)
        out = np.zeros((len(tasks), len(self.actions)))
        for start in range(0, len(tasks), batch_size):
            X, mask = pad(mats[start : start + batch_size], self.vocab.dim)
            out[start : start + batch_size] = softmax(self.net.last_logits(Batch(X, mask)), axis=-1)
        return out

    def item_scores(self, probs: np.ndarray) -> np.ndarray:
        n_sec = self.vocab.block_sizes[0]
        obj = self.actions[:, 1] - n_sec
        out = np.zeros((len(probs), self.vocab.K))
        for k, o in enumerate(self.vocab.item_object):
            cols = np.flatnonzero(obj == o) if o >= 0 else []
            if len(cols):
                sel = probs[:, cols]
                out[:, k] = sel.max(axis=1) if self.item_agg == "max" else sel.sum(axis=1)
        return out

    def score(self, tasks):
        return self.item_scores(self.next_action_proba(tasks))

    def get_state(self):
        arrays = prefixed("net", self.net.params)
        arrays["actions"] = self.actions
        return arrays, {"concat": self.concat, "units": self.units, "dropout": self.dropout,
                        "item_agg": self.item_agg, "history": self.history.to_dict()}

    def set_state(self, arrays, meta):
        self.actions = arrays["actions"]
        self.concat, self.units, self.dropout, self.item_agg = meta["concat"], meta["units"], meta["dropout"], meta["item_agg"]
        self.net = NextActionNet(self.vocab.dim, len(self.actions), self.units, None, self.dropout)
        self.net.params = sub(arrays, "net")


class SKNNRecommender(Recommender):
    """Nearest neighbours over max-pooled action sets of all recent sessions.

    score_k = sum of cosine similarities of the `neighbors` most similar
    training tasks whose purchase contained item k. With ``boost > 0``
    (SKNN_EB) items the target user interacted with get ``+ boost``.
    """

    def __init__(self, vocab, neighbors: int = 30, boost: float = 0.0):
        super().__init__(vocab)
        self.neighbors = neighbors
        self.boost = boost
        self.pooled: np.ndarray | None = None
        self.bought: np.ndarray | None = None

    @property
    def name(self):
        return "sknn-eb" if self.boost else "sknn-e"

    def fit(self, train, val=None):
        if not train:
            raise ValueError("sknn: empty training set")
        self.pooled = pooled_task_vectors(train, self.vocab)
        self.bought = target_matrix(train, self.vocab)
        return self

    def similarities(self, pooled: np.ndarray) -> np.ndarray:
        dots = pooled @ self.pooled.T  # integer counts, exact in float64
        na = np.sqrt(pooled.sum(axis=1))[:, None]
        nb = np.sqrt(self.pooled.sum(axis=1))[None, :]
        denom = na * nb
        return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)

    def interacted(self, pooled: np.ndarray) -> np.ndarray:
        n_sec = self.vocab.block_sizes[0]
        io = self.vocab.item_object
        out = np.zeros((len(pooled), self.vocab.K))
        has = io >= 0
        out[:, has] = pooled[:, n_sec + io[has]]
        return out

    def score(self, tasks):
        pooled = pooled_task_vectors(tasks, self.vocab)
        sims = self.similarities(pooled)
        n = min(self.neighbors, sims.shape[1])
        out = np.zeros((len(tasks), self.vocab.K))
        for i in range(len(tasks)):
            top = np.argsort(-sims[i], kind="stable")[:n]
            acc = np.zeros(self.vocab.K)
            for j in top:
                acc = acc + sims[i, j] * self.bought[j]
            out[i] = acc
        if self.boost:
            out = out + self.boost * self.interacted(pooled)
        return out

    def get_state(self):
        return {"pooled": self.pooled, "bought": self.bought}, {"neighbors": self.neighbors, "boost": self.boost}

    def set_state(self, arrays, meta):
        self.pooled, self.bought = arrays["pooled"], arrays["bought"]
        self.neighbors, self.boost = meta["neighbors"], meta["boost"]
