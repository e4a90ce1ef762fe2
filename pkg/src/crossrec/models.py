"""Cross-sessions recommenders: Encode, Concat, Auto, and their demographic hybrids.

All variants run a single GRU layer over a user's recent sessions and map
the final state to one sigmoid probability per item. They differ in what a
GRU step sees:

* encode: the max-pooled binarized actions of one session,
* concat: one binarized action (all sessions flattened in order),
* auto:   the final state of a pretrained GRU session autoencoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .base import History, Recommender, fit_network
from .data import Session, Vocabulary
from .features import (
    Batch,
    SequenceData,
    Standardizer,
    TokenData,
    concat_tasks,
    demographic_features,
    encode_tasks,
    pad,
    raw_demographics,
    session_matrix,
    target_matrix,
)
from .nn import (
    bce_from_logits,
    dense_backward,
    dense_forward,
    dropout_apply,
    gru_backward,
    gru_forward,
    init_dense,
    init_gru,
    prefixed,
    softmax_cross_entropy,
    sub,
)
from .sessionize import TaskInstance

VARIANTS = ("encode", "concat", "auto")

# batch size, units, dropout
TABLE3 = {
    "demographic": (32, 32, 0.3),
    "gru4rec": (32, 256, 0.2),
    "gru4rec-concat": (32, 256, 0.2),
    "concat": (128, 64, 0.3),
    "encode": (32, 64, 0.3),
    "auto": (32, 64, 0.4),
    "autoencoder": (128, 512, 0.0),
}


# ----------------------------------------------------------------- networks


class CrossSessionsNet:
    """GRU over a sequence of vectors -> dense(ReLU) -> dense -> sigmoid.

    With ``demo_dim > 0`` the head becomes
    concat(GRU state, dense_relu(demographics)) -> dense -> sigmoid.
    Dropout acts on the GRU output.
    """

    def __init__(self, input_dim, n_items, units=64, dense_units=None, dropout=0.3, demo_dim=0, demo_units=32, seed=0):
        rng = np.random.default_rng([seed, 0])
        self.dropout = dropout
        self.demo_dim = demo_dim
        p = prefixed("gru", init_gru(rng, input_dim, units))
        if demo_dim:
            p.update(prefixed("demo", init_dense(rng, demo_dim, demo_units)))
            p.update(prefixed("out", init_dense(rng, units + demo_units, n_items)))
        else:
            dense_units = dense_units or units
            p.update(prefixed("hidden", init_dense(rng, units, dense_units)))
            p.update(prefixed("out", init_dense(rng, dense_units, n_items)))
        self.params = p

    def _forward(self, batch: Batch, train, rng):
        p = self.params
        hs, gc = gru_forward(sub(p, "gru"), batch.X, batch.mask)
        h, keep = dropout_apply(hs[:, -1], self.dropout, rng, train)
        if self.demo_dim:
            if batch.demo is None:
                raise ValueError("hybrid model needs demographic features")
            d, dc = dense_forward(p["demo.W"], p["demo.b"], batch.demo, "relu")
            z, hc = np.hstack([h, d]), dc
        else:
            z, hc = dense_forward(p["hidden.W"], p["hidden.b"], h, "relu")
        o, oc = dense_forward(p["out.W"], p["out.b"], z, "identity")
        return o, (hs.shape, gc, keep, hc, oc)

    def logits(self, batch: Batch) -> np.ndarray:
        return self._forward(batch, False, None)[0]

    def loss(self, batch, train=False, rng=None) -> float:
        o, _ = self._forward(batch, train, rng)
        return bce_from_logits(o, batch.y)[0]

    def loss_and_grads(self, batch, rng=None, train=True):
        o, (hs_shape, gc, keep, hc, oc) = self._forward(batch, train, rng)
        loss, do, _ = bce_from_logits(o, batch.y)
        g = {}
        dz, go = dense_backward(do, oc)
        g.update(prefixed("out", go))
        if self.demo_dim:
            H = hs_shape[2]
            dh, dd = dz[:, :H], dz[:, H:]
            _, gd = dense_backward(dd, hc)
            g.update(prefixed("demo", gd))
        else:
            dh, gh = dense_backward(dz, hc)
            g.update(prefixed("hidden", gh))
        if keep is not None:
            dh = dh * keep
        dhs = np.zeros(hs_shape)
        dhs[:, -1] = dh
        _, _, gg = gru_backward(dhs, gc)
        g.update(prefixed("gru", gg))
        return loss, g


class FeedForwardNet:
    """dense(ReLU) -> dropout -> dense(ReLU) -> dense -> sigmoid on a flat feature vector."""

    def __init__(self, input_dim, n_items, units=32, dropout=0.3, seed=0):
        rng = np.random.default_rng([seed, 0])
        self.dropout = dropout
        p = prefixed("l1", init_dense(rng, input_dim, units))
        p.update(prefixed("l2", init_dense(rng, units, units)))
        p.update(prefixed("out", init_dense(rng, units, n_items)))
        self.params = p

    def _forward(self, batch, train, rng):
        p = self.params
        a1, c1 = dense_forward(p["l1.W"], p["l1.b"], batch.demo, "relu")
        a1, keep = dropout_apply(a1, self.dropout, rng, train)
        a2, c2 = dense_forward(p["l2.W"], p["l2.b"], a1, "relu")
        o, oc = dense_forward(p["out.W"], p["out.b"], a2, "identity")
        return o, (c1, keep, c2, oc)

    def logits(self, batch):
        return self._forward(batch, False, None)[0]

    def loss(self, batch, train=False, rng=None):
        return bce_from_logits(self._forward(batch, train, rng)[0], batch.y)[0]

    def loss_and_grads(self, batch, rng=None, train=True):
        o, (c1, keep, c2, oc) = self._forward(batch, train, rng)
        loss, do, _ = bce_from_logits(o, batch.y)
        g = {}
        da2, go = dense_backward(do, oc)
        da1, g2 = dense_backward(da2, c2)
        if keep is not None:
            da1 = da1 * keep
        _, g1 = dense_backward(da1, c1)
        g.update(prefixed("out", go))
        g.update(prefixed("l2", g2))
        g.update(prefixed("l1", g1))
        return loss, g


class NextActionNet:
    """GRU -> dropout -> dense(ReLU) -> softmax over the action vocabulary at every step."""

    def __init__(self, input_dim, n_actions, units=256, dense_units=None, dropout=0.2, seed=0):
        rng = np.random.default_rng([seed, 0])
        self.dropout = dropout
        dense_units = dense_units or units
        p = prefixed("gru", init_gru(rng, input_dim, units))
        p.update(prefixed("hidden", init_dense(rng, units, dense_units)))
        p.update(prefixed("out", init_dense(rng, dense_units, n_actions)))
        self.params = p

    def _forward(self, batch, train, rng):
        p = self.params
        hs, gc = gru_forward(sub(p, "gru"), batch.X, batch.mask)
        h, keep = dropout_apply(hs, self.dropout, rng, train)
        a, hc = dense_forward(p["hidden.W"], p["hidden.b"], h, "relu")
        o, oc = dense_forward(p["out.W"], p["out.b"], a, "identity")
        return o, (gc, keep, hc, oc)

    def last_logits(self, batch) -> np.ndarray:
        """Logits after the final real step of each sequence."""
        return self._forward(batch, False, None)[0][:, -1]

    def loss(self, batch, train=False, rng=None):
        o, _ = self._forward(batch, train, rng)
        return softmax_cross_entropy(o, batch.targets, batch.weights)[0]

    def loss_and_grads(self, batch, rng=None, train=True):
        o, (gc, keep, hc, oc) = self._forward(batch, train, rng)
        loss, do = softmax_cross_entropy(o, batch.targets, batch.weights)
        g = {}
        da, go = dense_backward(do, oc)
        dh, gh = dense_backward(da, hc)
        if keep is not None:
            dh = dh * keep
        _, _, gg = gru_backward(dh, gc)
        g.update(prefixed("out", go))
        g.update(prefixed("hidden", gh))
        g.update(prefixed("gru", gg))
        return loss, g


class SessionAutoencoder:
    """GRU encoder/decoder over a session's binarized actions.

    The encoder's final state is the session encoding. The decoder receives
    that encoding at every step and predicts the section, object and type of
    the action at that step, each with its own softmax.
    """

    def __init__(self, block_sizes: tuple[int, int, int], units=512, seed=0):
        rng = np.random.default_rng([seed, 0])
        self.block_sizes = tuple(block_sizes)
        D = sum(block_sizes)
        self.units = units
        p = prefixed("enc", init_gru(rng, D, units))
        p.update(prefixed("dec", init_gru(rng, units, units)))
        p.update(prefixed("out", init_dense(rng, units, D)))
        self.params = p

    @property
    def _bounds(self):
        a, b, _ = self.block_sizes
        return [(0, a), (a, a + b), (a + b, sum(self.block_sizes))]

    def _forward(self, batch):
        p = self.params
        hs_e, ec = gru_forward(sub(p, "enc"), batch.X, batch.mask)
        e = hs_e[:, -1]
        T = batch.X.shape[1]
        dec_in = np.repeat(e[:, None, :], T, axis=1)
        hs_d, dc = gru_forward(sub(p, "dec"), dec_in, batch.mask)
        o, oc = dense_forward(p["out.W"], p["out.b"], hs_d, "identity")
        return o, (hs_e.shape, ec, dc, oc)

    def _loss(self, o, batch):
        total, dos = 0.0, []
        for j, (lo, hi) in enumerate(self._bounds):
            l, d = softmax_cross_entropy(o[..., lo:hi], batch.targets[..., j], batch.weights)
            total += l
            dos.append(d)
        return total, np.concatenate(dos, axis=-1)

    def loss(self, batch, train=False, rng=None):
        return self._loss(self._forward(batch)[0], batch)[0]

    def loss_and_grads(self, batch, rng=None, train=True):
        o, (hs_shape, ec, dc, oc) = self._forward(batch)
        loss, do = self._loss(o, batch)
        g = {}
        dhd, go = dense_backward(do, oc)
        d_in, _, gd = gru_backward(dhd, dc)
        dhs_e = np.zeros(hs_shape)
        dhs_e[:, -1] = d_in.sum(axis=1)
        _, _, ge = gru_backward(dhs_e, ec)
        g.update(prefixed("out", go))
        g.update(prefixed("dec", gd))
        g.update(prefixed("enc", ge))
        return loss, g

    def encode_matrices(self, mats: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
        """Final encoder state for each (n_actions, D) matrix."""
        out = np.zeros((len(mats), self.units))
        D = sum(self.block_sizes)
        for start in range(0, len(mats), batch_size):
            X, mask = pad(mats[start : start + batch_size], D)
            hs, _ = gru_forward(sub(self.params, "enc"), X, mask)
            out[start : start + batch_size] = hs[:, -1]
        return out

    def reconstruct(self, mats: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Per-step argmax of each block, in block-local indices: list of (n, 3)."""
        X, mask = pad(mats, sum(self.block_sizes))
        o, _ = self._forward(Batch(X, mask))
        res = np.stack([o[..., lo:hi].argmax(-1) for lo, hi in self._bounds], axis=-1)
        return [res[i, : len(m)] for i, m in enumerate(mats)]


# --------------------------------------------------------------------- specs


@dataclass
class ModelSpec:
    variant: str = "encode"
    demographic: bool = False
    units: int | None = None
    batch_size: int | None = None
    dropout: float | None = None
    dense_units: int | None = None
    demo_units: int = 32
    max_epochs: int = 50
    patience: int = 1
    lr: float = 0.001
    seed: int = 0
    auto_units: int = 512
    auto_batch_size: int = 128
    auto_max_epochs: int = 20

    def resolved(self) -> "ModelSpec":
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        bs, units, drop = TABLE3[self.variant]
        spec = replace(
            self,
            units=self.units or units,
            batch_size=self.batch_size or bs,
            dropout=drop if self.dropout is None else self.dropout,
        )
        if spec.units <= 0 or spec.batch_size <= 0 or not 0 <= spec.dropout < 1:
            raise ValueError(f"invalid hyperparameters {spec}")
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


def autoencoder_data(sessions: Sequence[Session], vocab: Vocabulary) -> TokenData:
    n_sec, n_obj, _ = vocab.block_sizes
    seqs, targets, weights = [], [], []
    for s in sessions:
        codes = vocab.action_codes(s.actions)
        seqs.append(session_matrix(s, vocab))
        targets.append(codes - np.array([0, n_sec, n_sec + n_obj]))
        weights.append(np.ones(len(s)))
    return TokenData(seqs, targets, weights, vocab.dim)


def train_autoencoder(
    sessions: Sequence[Session],
    vocab: Vocabulary,
    units: int = 512,
    batch_size: int = 128,
    max_epochs: int = 20,
    patience: int = 1,
    lr: float = 0.001,
    seed: int = 0,
    val_sessions: Sequence[Session] | None = None,
) -> tuple[SessionAutoencoder, History]:
    """Train the session autoencoder; validation defaults to the training sessions."""
    ae = SessionAutoencoder(vocab.block_sizes, units, seed)
    train = autoencoder_data(sessions, vocab)
    val = autoencoder_data(val_sessions, vocab) if val_sessions else train
    hist = fit_network(ae, train, val, batch_size, max_epochs, patience, lr, seed)
    return ae, hist


def _unique_sessions(tasks: Sequence[TaskInstance]) -> list[Session]:
    seen, out = set(), []
    for t in tasks:
        for s in t.sessions:
            if s.session_id not in seen:
                seen.add(s.session_id)
                out.append(s)
    return out


class CrossSessionsModel(Recommender):
    def __init__(self, vocab: Vocabulary, spec: ModelSpec | None = None, autoencoder: SessionAutoencoder | None = None):
        super().__init__(vocab)
        self.spec = (spec or ModelSpec()).resolved()
        self.autoencoder = autoencoder
        self.net: CrossSessionsNet | None = None
        self.standardizer: Standardizer | None = None
        self.history = History()
        self.autoencoder_history: History | None = None

    @property
    def name(self):
        return ("hybrid-" if self.spec.demographic else "") + self.spec.variant

    def sequences(self, tasks: Sequence[TaskInstance]) -> tuple[list[np.ndarray], int]:
        v = self.spec.variant
        if v == "encode":
            return encode_tasks(tasks, self.vocab), self.vocab.dim
        if v == "concat":
            return concat_tasks(tasks, self.vocab), self.vocab.dim
        if self.autoencoder is None:
            raise RuntimeError("auto variant needs a trained session autoencoder")
        mats, owner = [], []
        for i, t in enumerate(tasks):
            for s in t.sessions:
                mats.append(session_matrix(s, self.vocab))
                owner.append(i)
        enc = self.autoencoder.encode_matrices(mats)
        owner = np.array(owner, dtype=np.int64)
        return [enc[owner == i] for i in range(len(tasks))], self.autoencoder.units

    def data(self, tasks: Sequence[TaskInstance], with_targets: bool = True) -> SequenceData:
        seqs, dim = self.sequences(tasks)
        demo = demographic_features(tasks, self.vocab, self.standardizer) if self.spec.demographic else None
        y = target_matrix(tasks, self.vocab) if with_targets else None
        return SequenceData(seqs, dim, y, demo)

    def build_net(self, input_dim: int, demo_dim: int = 0) -> CrossSessionsNet:
        s = self.spec
        return CrossSessionsNet(input_dim, self.vocab.K, s.units, s.dense_units, s.dropout, demo_dim, s.demo_units, s.seed)

    def fit(self, train, val=None):
        if not train or not val:
            raise ValueError("cross-sessions training needs non-empty train and validation tasks")
        s = self.spec
        if s.variant == "auto" and self.autoencoder is None:
            self.autoencoder, self.autoencoder_history = train_autoencoder(
                _unique_sessions(train), self.vocab, s.auto_units, s.auto_batch_size,
                s.auto_max_epochs, s.patience, s.lr, s.seed, _unique_sessions(val),
            )
        if s.demographic:
            self.standardizer = Standardizer.fit(raw_demographics(train))
        tr, va = self.data(train), self.data(val)
        self.net = self.build_net(tr.dim, 0 if tr.demo is None else tr.demo.shape[1])
        self.history = fit_network(self.net, tr, va, s.batch_size, s.max_epochs, s.patience, s.lr, s.seed)
        return self

    def predict_proba(self, tasks: Sequence[TaskInstance], batch_size: int = 512) -> np.ndarray:
        d = self.data(tasks, with_targets=False)
        out = np.zeros((len(tasks), self.vocab.K))
        for start in range(0, len(tasks), batch_size):
            idx = np.arange(start, min(start + batch_size, len(tasks)))
            out[idx] = expit(self.net.logits(d.batch(idx)))
        return out

    score = predict_proba

    def get_state(self):
        arrays = prefixed("net", self.net.params)
        if self.autoencoder is not None:
            arrays.update(prefixed("ae", self.autoencoder.params))
        if self.standardizer is not None:
            arrays["std.mean"] = self.standardizer.mean
            arrays["std.scale"] = self.standardizer.scale
        meta = {"spec": self.spec.to_dict(), "history": self.history.to_dict()}
        if self.autoencoder is not None:
            meta["autoencoder_units"] = self.autoencoder.units
        return arrays, meta

    def set_state(self, arrays, meta):
        if "autoencoder_units" in meta:
            self.autoencoder = SessionAutoencoder(self.vocab.block_sizes, meta["autoencoder_units"])
            self.autoencoder.params = sub(arrays, "ae")
        if "std.mean" in arrays:
            self.standardizer = Standardizer(arrays["std.mean"], arrays["std.scale"])
        net_params = sub(arrays, "net")
        input_dim = net_params["gru.W"].shape[1]
        demo_dim = net_params["demo.W"].shape[1] if "demo.W" in net_params else 0
        self.net = self.build_net(input_dim, demo_dim)
        self.net.params = net_params
        h = meta.get("history", {})
        self.history = History(h.get("train_loss", []), h.get("val_loss", []), h.get("best_epoch", 0))
