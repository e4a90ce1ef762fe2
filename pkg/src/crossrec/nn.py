"""Small float64 neural kernel: dense and GRU layers with hand-written backward passes.

Layers follow the forward/cache/backward pattern: ``*_forward`` returns the
output and a cache, ``*_backward`` consumes the upstream gradient and the
cache. Batches are padded on the right; a ``mask`` of shape (B, T) marks real
steps, and on padded steps the GRU carries its state through unchanged, so
the state at the last index is the state after the last real step.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit, log_softmax, softmax

EPS_CLAMP = 1e-7
GRU_KEYS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "W", "U", "b")


class GradientError(FloatingPointError):
    pass


# --------------------------------------------------------------------- init


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def init_dense(rng, n_in: int, n_out: int) -> dict[str, np.ndarray]:
    return {"W": glorot_uniform(rng, n_out, n_in), "b": np.zeros(n_out)}


def init_gru(rng, n_in: int, n_hidden: int) -> dict[str, np.ndarray]:
    p = {}
    for gate in ("z", "r", ""):
        p[f"W{gate}"] = glorot_uniform(rng, n_hidden, n_in)
        p[f"U{gate}"] = glorot_uniform(rng, n_hidden, n_hidden)
        p[f"b{gate}"] = np.zeros(n_hidden)
    return p


def sub(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """View of the parameters under ``prefix.`` with the prefix stripped."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def prefixed(prefix: str, d: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in d.items()}


# -------------------------------------------------------------------- dense

_ACTS = ("relu", "sigmoid", "tanh", "identity", "softmax")


def _activate(a, act):
    if act == "relu":
        return np.maximum(a, 0.0)
    if act == "sigmoid":
        return expit(a)
    if act == "tanh":
        return np.tanh(a)
    if act == "identity":
        return a
    if act == "softmax":
        return softmax(a, axis=-1)
    raise ValueError(f"unknown activation {act!r}; expected one of {_ACTS}")


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, act: str = "identity"):
    """y = act(x W^T + b) for x of shape (..., n_in)."""
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"dense: input {x.shape} does not match weights {W.shape} / bias {b.shape}")
    a = x @ W.T + b
    y = _activate(a, act)
    return y, (x, W, a, y, act)


def dense_backward(dy: np.ndarray, cache):
    x, W, a, y, act = cache
    if act == "relu":
        da = dy * (a > 0)
    elif act == "sigmoid":
        da = dy * y * (1 - y)
    elif act == "tanh":
        da = dy * (1 - y * y)
    elif act == "identity":
        da = dy
    elif act == "softmax":
        da = y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    else:
        raise ValueError(act)
    x2 = x.reshape(-1, x.shape[-1])
    da2 = da.reshape(-1, da.shape[-1])
    return da @ W, {"W": da2.T @ x2, "b": da2.sum(axis=0)}


# ---------------------------------------------------------------------- GRU


def _check_gru(p, n_in):
    H = p["U"].shape[0]
    for k in GRU_KEYS:
        if k not in p:
            raise ValueError(f"GRU parameter {k} missing")
    for k in ("Wz", "Wr", "W"):
        if p[k].shape != (H, n_in):
            raise ValueError(f"GRU {k} has shape {p[k].shape}, expected {(H, n_in)}")
    for k in ("Uz", "Ur", "U"):
        if p[k].shape != (H, H):
            raise ValueError(f"GRU {k} has shape {p[k].shape}, expected {(H, H)}")
    return H


def gru_step(p: Mapping[str, np.ndarray], s: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One GRU update.

    z = sigmoid(Wz s + Uz h + bz), r = sigmoid(Wr s + Ur h + br),
    c = tanh(W s + U (r * h) + b), h' = (1 - z) * h + z * c.
    """
    H = _check_gru(p, s.shape[-1])
    if h_prev.shape[-1] != H:
        raise ValueError(f"hidden state has size {h_prev.shape[-1]}, expected {H}")
    z = expit(s @ p["Wz"].T + h_prev @ p["Uz"].T + p["bz"])
    r = expit(s @ p["Wr"].T + h_prev @ p["Ur"].T + p["br"])
    c = np.tanh(s @ p["W"].T + (r * h_prev) @ p["U"].T + p["b"])
    return (1 - z) * h_prev + z * c


def gru_forward(p, X: np.ndarray, mask: np.ndarray | None = None, h0: np.ndarray | None = None):
    """Run the GRU over X (B, T, D). Returns all states (B, T, H) and a cache."""
    B, T, D = X.shape
    H = _check_gru(p, D)
    if mask is None:
        mask = np.ones((B, T))
    h = np.zeros((B, H)) if h0 is None else h0
    xz = X @ p["Wz"].T + p["bz"]
    xr = X @ p["Wr"].T + p["br"]
    xc = X @ p["W"].T + p["b"]
    hs = np.empty((B, T, H))
    hp = np.empty((B, T, H))
    zs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    for t in range(T):
        z = expit(xz[:, t] + h @ p["Uz"].T)
        r = expit(xr[:, t] + h @ p["Ur"].T)
        c = np.tanh(xc[:, t] + (r * h) @ p["U"].T)
        m = mask[:, t, None]
        hp[:, t], zs[:, t], rs[:, t], cs[:, t] = h, z, r, c
        h = m * ((1 - z) * h + z * c) + (1 - m) * h
        hs[:, t] = h
    return hs, (X, mask, p, hp, zs, rs, cs)


def gru_backward(dhs: np.ndarray, cache):
    """Backpropagation through time. Returns (dX, dh0, grads)."""
    X, mask, p, hp, zs, rs, cs = cache
    B, T, H = hs_shape = dhs.shape
    daz = np.zeros(hs_shape)
    dar = np.zeros(hs_shape)
    dac = np.zeros(hs_shape)
    g = {k: np.zeros_like(v) for k, v in p.items() if k in GRU_KEYS}
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dhs[:, t] + dh_next
        m = mask[:, t, None]
        h, z, r, c = hp[:, t], zs[:, t], rs[:, t], cs[:, t]
        dhn = m * dh
        dh_prev = (1 - m) * dh + dhn * (1 - z)
        dz = dhn * (c - h)
        d_c = dhn * z * (1 - c * c)
        drh = d_c @ p["U"]
        dr = drh * h
        dh_prev += drh * r
        d_r = dr * r * (1 - r)
        d_z = dz * z * (1 - z)
        g["U"] += d_c.T @ (r * h)
        g["Ur"] += d_r.T @ h
        g["Uz"] += d_z.T @ h
        dh_prev += d_r @ p["Ur"] + d_z @ p["Uz"]
        daz[:, t], dar[:, t], dac[:, t] = d_z, d_r, d_c
        dh_next = dh_prev
    X2 = X.reshape(B * T, -1)
    for gate, d in (("z", daz), ("r", dar), ("", dac)):
        d2 = d.reshape(B * T, H)
        g[f"W{gate}"] += d2.T @ X2
        g[f"b{gate}"] += d2.sum(axis=0)
    dX = daz @ p["Wz"] + dar @ p["Wr"] + dac @ p["W"]
    return dX, dh_next, g


# ----------------------------------------------------------------- max pool


def maxpool_forward(X: np.ndarray, mask: np.ndarray | None = None):
    """Element-wise max over the time axis of X (B, T, D), ignoring padded steps."""
    if mask is not None:
        Xm = np.where(mask[:, :, None] > 0, X, -np.inf)
    else:
        Xm = X
    idx = np.argmax(Xm, axis=1)  # first maximal index on ties
    y = np.take_along_axis(X, idx[:, None, :], axis=1)[:, 0]
    return y, (X.shape, idx)


def maxpool_backward(dy: np.ndarray, cache):
    shape, idx = cache
    dX = np.zeros(shape)
    np.put_along_axis(dX, idx[:, None, :], dy[:, None, :], axis=1)
    return dX


# ------------------------------------------------------------------ dropout


def dropout_apply(x: np.ndarray, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout. Returns (output, keep-mask scaled by 1/(1-rate)) or (x, None)."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


# ------------------------------------------------------------------- losses


def bce_multilabel_loss(p_hat: np.ndarray, p: np.ndarray) -> float:
    """Binary cross-entropy summed over items (and over the batch if 2-D)."""
    p_hat = np.asarray(p_hat, dtype=float)
    p = np.asarray(p, dtype=float)
    if p_hat.shape != p.shape:
        raise ValueError(f"prediction shape {p_hat.shape} != target shape {p.shape}")
    q = np.clip(p_hat, EPS_CLAMP, 1 - EPS_CLAMP)
    return float(-(p * np.log(q) + (1 - p) * np.log(1 - q)).sum())


def bce_from_logits(o: np.ndarray, p: np.ndarray):
    """Loss of sigmoid(o) against p with clamping, and its exact gradient w.r.t. o."""
    p_hat = expit(o)
    loss = bce_multilabel_loss(p_hat, p)
    inside = (p_hat > EPS_CLAMP) & (p_hat < 1 - EPS_CLAMP)
    return loss, np.where(inside, p_hat - p, 0.0), p_hat


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray | None = None):
    """Sum of -log softmax(logits)[target] over rows. Returns (loss, dlogits)."""
    C = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexError(f"target index out of range [0, {C})")
    lz = log_softmax(logits, axis=-1)
    nll = -np.take_along_axis(lz, targets[..., None], axis=-1)[..., 0]
    w = np.ones(nll.shape) if weights is None else weights
    d = np.exp(lz)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    return float((w * nll).sum()), d * w[..., None]


def cce_loss(block_logits, block_targets, weights=None) -> float:
    """Categorical cross-entropy summed over blocks (section, object, type) and steps."""
    return sum(softmax_cross_entropy(l, t, weights)[0] for l, t in zip(block_logits, block_targets))


# --------------------------------------------------------------------- Adam


@dataclass
class Adam:
    """Bias-corrected Adam with TensorFlow's default hyperparameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            if self.m[k].shape != g.shape:
                raise ValueError(f"gradient {k} changed shape")
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {k}")


# ---------------------------------------------------------- gradient check


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    rng: np.random.Generator | None = None,
    per_param: int | None = None,
    h: float = 1e-5,
) -> dict[str, float]:
    """Compare analytic `grads` with central differences of `loss_fn`.

    Checks every coordinate, or `per_param` random coordinates of each
    tensor. Returns the worst relative error per parameter.
    """
    worst = {}
    for name, arr in params.items():
        if per_param is None or arr.size <= per_param:
            coords = list(np.ndindex(arr.shape))
        else:
            flat = rng.choice(arr.size, size=per_param, replace=False)
            coords = [np.unravel_index(i, arr.shape) for i in flat]
        errs = [relative_error(grads[name][c], numerical_gradient(loss_fn, arr, c, h)) for c in coords]
        worst[name] = max(errs) if errs else 0.0
    return worst


# -------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Arrays plus JSON metadata in one .npz; float64 values reload bit-exactly."""
    meta = {"format_version": CHECKPOINT_VERSION, **meta}
    payload = {f"p/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed entry timestamps keep reruns byte-identical (np.savez stamps the clock)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, payload[name], allow_pickle=False)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    return arrays, meta
