"""Acceptance criteria 1-9, one PASS/FAIL line each (see the terminal summary).

Criteria 2 (real-data half) and 7 need the published dataset: point
CROSSREC_DATA_DIR at it, optionally with CROSSREC_SCHEMA_MANIFEST for its
column mapping.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from crossrec.baselines import SKNNRecommender
from crossrec.data import ACTION_TYPES, SECTIONS, Vocabulary
from crossrec.evaluation import anova_oneway, mcnemar, metrics_at_k, post_filter
from crossrec.features import Batch, encode_session_maxpool, session_matrix
from crossrec.models import CrossSessionsModel, CrossSessionsNet, FeedForwardNet, ModelSpec, NextActionNet, SessionAutoencoder
from crossrec.nn import numerical_gradient
from crossrec.pipeline import PreprocessConfig, RunConfig, preprocess_stage, run_experiment
from crossrec.sessionize import DAY, Gmm2, crossing_point, fit_gmm2_em
from crossrec.synth import SynthConfig, generate_dataset

from conftest import random_task, record, session, task

DATA_DIR = os.environ.get("CROSSREC_DATA_DIR")
needs_data = pytest.mark.skipif(not DATA_DIR, reason="CROSSREC_DATA_DIR not set; published dataset absent")


def verdict(n: int, checks: dict[str, bool], detail: str) -> None:
    failed = [k for k, ok in checks.items() if not ok]
    record(n, "PASS" if not failed else "FAIL", detail + (f" | failed: {', '.join(failed)}" if failed else ""))
    assert not failed, detail


def _metrics(out: Path) -> dict[str, dict[str, float]]:
    with open(out / "reports" / "metrics.csv") as fh:
        return {r["model"]: {k: float(v) for k, v in r.items() if k != "model"} for r in csv.DictReader(fh)}


# ------------------------------------------------------------- 1: gradients

KINK_MARGIN = 1e-3
COORDS_PER_TENSOR = 5


def _relu_margin(cache) -> float:
    """Smallest |pre-activation| over every ReLU layer found in a forward cache."""
    if isinstance(cache, tuple) and len(cache) == 5 and isinstance(cache[4], str):
        return float(np.abs(cache[2]).min()) if cache[4] == "relu" else math.inf
    if isinstance(cache, (tuple, list)):
        return min([_relu_margin(c) for c in cache] + [math.inf])
    return math.inf


def _seq_batch(rng, D, K, T, demo=0, B=3):
    X = (rng.random((B, T, D)) < 0.4).astype(float)
    mask = np.ones((B, T))
    if T > 1:
        mask[0, int(rng.integers(1, T)) :] = 0.0
    y = (rng.random((B, K)) < 0.5).astype(float)
    return Batch(X, mask, y, rng.standard_normal((B, demo)) if demo else None)


def _dense_batch(rng, D, K, T, B=3):
    b = _seq_batch(rng, D, K, T, B=B)
    return Batch(np.tanh(rng.standard_normal(b.X.shape)), b.mask, b.y, None)


def _token_batch(rng, D, T, classes, B=3):
    X = (rng.random((B, T, D)) < 0.4).astype(float)
    mask = np.ones((B, T))
    mask[1, int(rng.integers(1, T)) :] = 0.0
    if isinstance(classes, tuple):
        tg = np.stack([rng.integers(0, c, (B, T)) for c in classes], axis=-1)
    else:
        tg = rng.integers(0, classes, (B, T))
    return Batch(X, mask, targets=tg, weights=mask.copy())


ARCHITECTURES = {
    "encode": lambda s, r: (CrossSessionsNet(7, 4, units=8, dropout=0.3, seed=s), _seq_batch(r, 7, 4, T=4)),
    "concat": lambda s, r: (CrossSessionsNet(7, 4, units=8, dropout=0.3, seed=s), _seq_batch(r, 7, 4, T=8)),
    "auto-autoencoder": lambda s, r: (SessionAutoencoder((2, 3, 2), units=8, seed=s), _token_batch(r, 7, 5, (2, 3, 2))),
    "auto-head": lambda s, r: (CrossSessionsNet(6, 4, units=8, dropout=0.3, seed=s), _dense_batch(r, 6, 4, T=4)),
    "hybrid": lambda s, r: (CrossSessionsNet(7, 4, units=8, dropout=0.3, demo_dim=3, demo_units=4, seed=s), _seq_batch(r, 7, 4, T=4, demo=3)),
    "demographic": lambda s, r: (FeedForwardNet(6, 4, units=8, dropout=0.3, seed=s), _seq_batch(r, 1, 4, T=1, demo=6)),
    "gru4rec": lambda s, r: (NextActionNet(7, 6, units=8, dropout=0.2, seed=s), _token_batch(r, 7, 5, 6)),
}


def _draw(name, seed):
    """A kink-free random draw: parameters, inputs and a fixed dropout mask."""
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, attempt])
        net, batch = ARCHITECTURES[name](seed, rng)
        for v in net.params.values():
            v[...] = rng.normal(0.0, 0.5, v.shape)
        _, cache = net._forward(batch, True, np.random.default_rng([seed, 99])) if not isinstance(net, SessionAutoencoder) else (None, ())
        if _relu_margin(cache) > KINK_MARGIN:
            return net, batch, rng
        attempt += 1


def _tensor_errors(net, batch, seed, rng) -> dict[str, float]:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) per parameter tensor."""
    drop = lambda: np.random.default_rng([seed, 99])
    _, grads = net.loss_and_grads(batch, rng=drop(), train=True)
    f = lambda: net.loss(batch, train=True, rng=drop())
    out = {}
    for name, arr in net.params.items():
        flat = rng.choice(arr.size, size=min(COORDS_PER_TENSOR, arr.size), replace=False)
        coords = [np.unravel_index(i, arr.shape) for i in flat]
        a = np.array([grads[name][c] for c in coords])
        n = np.array([numerical_gradient(f, arr, c) for c in coords])
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        out[name] = float(np.linalg.norm(a - n) / scale)
    return out


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {}
    for name in ARCHITECTURES:
        w = 0.0
        for seed in range(100):
            net, batch, rng = _draw(name, seed)
            w = max(w, max(_tensor_errors(net, batch, seed, rng).values()))
        worst[name] = w
    elapsed = time.perf_counter() - t0
    checks = {f"{k} < 1e-4": v < 1e-4 for k, v in worst.items()}
    checks["runtime < 60 s"] = elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s"
    verdict(1, checks, "worst relative error over 100 draws: " + detail)


# ----------------------------------------------------------------- 2: GMM


def _bisect(g: Gmm2) -> float:
    f = lambda x: g.weights[0] * stats.norm.pdf(x, g.means[0], g.stds[0]) - g.weights[1] * stats.norm.pdf(x, g.means[1], g.stds[1])
    lo, hi = g.means
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (f(lo) > 0) == (f(mid) > 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_criterion_2_gmm_threshold():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    comp = rng.random(20_000) < 0.5
    x = np.where(comp, rng.normal(0, 1, comp.size), rng.normal(6, 1, comp.size))
    g = fit_gmm2_em(x)
    c = crossing_point(g)
    gap = abs(c - _bisect(g))
    sym = crossing_point(Gmm2((0.5, 0.5), (0.0, 2.0), (1.0, 1.0)))
    elapsed = time.perf_counter() - t0
    checks = {
        "mean 0 within 0.1": abs(g.means[0]) <= 0.1,
        "mean 6 within 0.1": abs(g.means[1] - 6) <= 0.1,
        "crossing within 1e-6 of bisection": gap <= 1e-6,
        "symmetric midpoint exact": sym == 1.0,
        "runtime < 10 s": elapsed < 10,
    }
    real = "" if DATA_DIR else "; real-data threshold SKIP (dataset absent)"
    verdict(2, checks, f"means {g.means[0]:.4f}/{g.means[1]:.4f}, crossing gap {gap:.1e}, {elapsed:.2f} s{real}")


# ------------------------------------------------------------ 3: metrics


def _brute_metrics(ranking, relevant, k):
    flags = [x in relevant for x in ranking[:k]]
    ranks = [i + 1 for i, f in enumerate(flags) if f]
    return {
        "HR": 1.0 if ranks else 0.0,
        "Precision": len(ranks) / k,
        "Recall": len(ranks) / len(relevant),
        "MRR": 1 / ranks[0] if ranks else 0.0,
        "MAP": sum(sum(flags[:r]) / r for r in ranks) / min(len(relevant), k),
    }


def test_criterion_3_metric_oracle():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        K = int(rng.integers(1, 10))
        ranking = list(rng.permutation(K))
        relevant = set(rng.choice(K, size=int(rng.integers(1, K + 1)), replace=False).tolist())
        k = int(rng.integers(1, 6))
        mismatches += metrics_at_k(ranking, relevant, k) != _brute_metrics(ranking, relevant, k)
    ex1 = metrics_at_k(list("ABC"), {"B"}, 3) == {"HR": 1.0, "Precision": 1 / 3, "Recall": 1.0, "MRR": 0.5, "MAP": 0.5}
    ex2 = set(metrics_at_k(list("ABCD"), {"D"}, 3).values()) == {0.0}
    m3 = metrics_at_k(list("ABC"), {"A", "C"}, 3)
    ex3 = m3["Precision"] == 2 / 3 and m3["Recall"] == 1 and m3["MRR"] == 1 and abs(m3["MAP"] - 5 / 6) < 1e-15
    checks = {"1000 cases exact": mismatches == 0, "example {B}": ex1, "example {D}": ex2, "example MAP 5/6": ex3}
    verdict(3, checks, f"{1000 - mismatches}/1000 brute-force cases exact; worked examples {sum([ex1, ex2, ex3])}/3")


# --------------------------------------------------------------- 4: SKNN


def _exhaustive_sknn(train, tasks, vocab, n, boost):
    bits = lambda t: {int(c) for s in t.sessions for c in vocab.action_codes(s.actions).ravel()}
    pool = [bits(t) for t in train]
    n_sec = len(vocab.sections)
    out = np.zeros((len(tasks), vocab.K))
    for i, t in enumerate(tasks):
        a = bits(t)
        sims = [len(a & b) / (math.sqrt(len(a)) * math.sqrt(len(b))) if a and b else 0.0 for b in pool]
        for j in sorted(range(len(pool)), key=lambda j: (-sims[j], j))[:n]:
            out[i] = out[i] + sims[j] * vocab.items_vector(train[j].items)
        if boost:
            for k, o in enumerate(vocab.item_object):
                out[i, k] += boost * (o >= 0 and n_sec + o in a)
    return out


def test_criterion_4_sknn_equivalence():
    vocab = Vocabulary(SECTIONS, ("A", "B", "C", "D", "svc", "no-object"), ACTION_TYPES, ("A", "B", "C", "D"))
    exact = {"E": 0, "EB": 0}
    for d in range(50):
        rng = np.random.default_rng([4, d])
        n_users = int(rng.integers(2, 21))
        tasks = [random_task(rng, vocab, f"u{i}", 10 * int(DAY) + i) for i in range(n_users)]
        cut = max(1, n_users - 3)
        train, test = tasks[:cut], tasks[cut:] or tasks[:1]
        n = int(rng.choice([1, 3, 30]))
        for label, boost in (("E", 0.0), ("EB", 0.5)):
            got = SKNNRecommender(vocab, neighbors=n, boost=boost).fit(train).score(test)
            exact[label] += bool(np.array_equal(got, _exhaustive_sknn(train, test, vocab, n, boost)))
    checks = {f"SKNN_{k} 50/50": v == 50 for k, v in exact.items()}
    verdict(4, checks, f"exact agreement on micro-datasets: E {exact['E']}/50, EB {exact['EB']}/50")


# ------------------------------------------------- 5 and 6: planted signal


@pytest.fixture(scope="module")
def planted_run(tmp_path_factory):
    cfg = RunConfig(
        out=str(tmp_path_factory.mktemp("planted")),
        pipeline="full",
        seed=0,
        models=["encode", "sknn-e", "popular", "random"],
        synth=SynthConfig(n_users=5000, rule_strength=1.0),
        analysis={"ablation": True, "ablation_models": ["encode"], "breakdown": False},
    )
    t0 = time.perf_counter()
    out = run_experiment(cfg)
    return out, time.perf_counter() - t0


def test_criterion_5_planted_signal(planted_run):
    out, elapsed = planted_run
    hr = {m: v["HR@3"] for m, v in _metrics(out).items()}
    checks = {
        "Encode HR@3 >= 0.95": hr["encode"] >= 0.95,
        "Encode - Popular >= 0.15": hr["encode"] - hr["popular"] >= 0.15,
        "Encode >= SKNN_E": hr["encode"] >= hr["sknn-e"],
        "SKNN_E > Popular": hr["sknn-e"] > hr["popular"],
        "Popular > Random": hr["popular"] > hr["random"],
        "runtime < 20 min": elapsed < 1200,
    }
    detail = ", ".join(f"{m} {v:.4f}" for m, v in hr.items())
    verdict(5, checks, f"HR@3 {detail}; margin {hr['encode'] - hr['popular']:.3f}; {elapsed:.0f} s (incl. ablation)")


def test_criterion_6_ablation_direction(planted_run):
    out, _ = planted_run
    with open(out / "analysis" / "ablation.csv") as fh:
        rows = {r["group"]: float(r["relative_change"]) for r in csv.DictReader(fh) if r["measure"] == "HR@3"}
    items, complete = rows["object:items"], rows["type:complete"]
    checks = {"items drop >= 20%": items <= -0.20, "complete changes < 2%": abs(complete) < 0.02}
    verdict(6, checks, f"HR@3 relative change without items {items:+.1%}, without 'complete' {complete:+.1%}")


# ------------------------------------------------------ 2 and 7: real data


@pytest.fixture(scope="module")
def real_run(tmp_path_factory):
    if not DATA_DIR:
        pytest.skip("CROSSREC_DATA_DIR not set")
    cfg = RunConfig(
        data=DATA_DIR,
        schema_manifest=os.environ.get("CROSSREC_SCHEMA_MANIFEST"),
        out=str(tmp_path_factory.mktemp("published")),
        pipeline="evaluate",
        models=["encode", "sknn-eb"],
    )
    return run_experiment(cfg)


@needs_data
def test_criterion_2_real_threshold(real_run):
    days = json.loads((real_run / "threshold.json").read_text())["threshold_days"]
    verdict(2, {"threshold in [8, 12] days": 8 <= days <= 12}, f"published data threshold {days:.2f} days (reference 10)")


@needs_data
def test_criterion_7_published_numbers(real_run):
    m = _metrics(real_run)
    enc_hr, enc_map, eb_hr = m["encode"]["HR@3"], m["encode"]["MAP@3"], m["sknn-eb"]["HR@3"]
    checks = {
        "Encode HR@3 0.838 +- 0.03": abs(enc_hr - 0.838) <= 0.03,
        "Encode MAP@3 0.692 +- 0.03": abs(enc_map - 0.692) <= 0.03,
        "SKNN_EB HR@3 0.813 +- 0.02": abs(eb_hr - 0.813) <= 0.02,
    }
    verdict(7, checks, f"Encode HR@3 {enc_hr:.4f} MAP@3 {enc_map:.4f}; SKNN_EB HR@3 {eb_hr:.4f}")


def test_criterion_7_skip_notice():
    if DATA_DIR:
        pytest.skip("dataset present; criterion 7 is checked against it")
    record(7, "SKIP", "published dataset absent (set CROSSREC_DATA_DIR)")
    pytest.skip("published dataset absent")


# -------------------------------------------------------------- 8: invariances


def _small_run(out, seed=0):
    cfg = RunConfig(
        out=str(out),
        seed=seed,
        models=["encode", "concat", "sknn-eb", "popular"],
        synth=SynthConfig(n_users=400),
        hyperparameters={"encode": {"units": 8, "max_epochs": 3}, "concat": {"units": 8, "max_epochs": 2}},
    )
    run_experiment(cfg)
    return json.loads((Path(out) / "manifest.json").read_text())["artifacts"]


def test_criterion_8_invariances(tmp_path):
    vocab = Vocabulary(SECTIONS, ("A", "B", "C", "svc", "no-object"), ACTION_TYPES, ("A", "B", "C"))
    rng = np.random.default_rng(8)

    # encode output under within-session action shuffles
    model = CrossSessionsModel(vocab, ModelSpec(units=8))
    model.net = model.build_net(vocab.dim)
    tasks = [random_task(rng, vocab, f"u{i}", 10 * int(DAY)) for i in range(30)]
    shuffled = []
    for t in tasks:
        new = []
        for s in t.sessions:
            labels = [a.key for a in s.actions]
            new.append(session(s.session_id, s.user_id, [labels[i] for i in rng.permutation(len(labels))], start=s.start_time))
        shuffled.append(task(t.user_id, t.timestamp, new, t.items, t.portfolio, t.demographics))
    shuffle_ok = np.array_equal(model.predict_proba(tasks), model.predict_proba(shuffled))

    # max-pool idempotence: duplicating actions or pooling a pooled vector changes nothing
    s = tasks[0].sessions[0]
    doubled = session("d", "u", [a.key for a in s.actions] * 2)
    enc = encode_session_maxpool(s, vocab)
    pool_ok = np.array_equal(enc, encode_session_maxpool(doubled, vocab)) and np.array_equal(
        enc, np.vstack([enc, session_matrix(s, vocab)]).max(axis=0)
    )

    # post-filter never raises a score and leaves base products alone
    scores = rng.normal(size=(500, 3))
    portfolio = rng.integers(0, 2, size=(500, 3))
    filtered = post_filter(scores, portfolio, {2: 0})
    post_ok = bool(np.all(filtered <= scores)) and np.array_equal(filtered[:, :2], scores[:, :2])

    # EM log-likelihood never decreases
    x = np.r_[rng.normal(0, 1, 3000), rng.normal(4, 0.7, 2000)]
    em_ok = bool(np.all(np.diff(fit_gmm2_em(x).history) >= -1e-12))

    # preprocessing is idempotent
    ds = generate_dataset(SynthConfig(n_users=300, seed=8))
    once, _ = preprocess_stage(ds, PreprocessConfig())
    twice, rep = preprocess_stage(once, PreprocessConfig())
    prep_ok = twice.sessions == once.sessions and twice.purchases == once.purchases and rep.passes == 1

    # whole runs: same seed twice, and a rerun into the same directory
    a = _small_run(tmp_path / "a")
    b = _small_run(tmp_path / "b")
    again = _small_run(tmp_path / "a")
    rerun_ok = a == b
    idem_ok = again == a

    checks = {
        "encode within-session shuffle": shuffle_ok,
        "max-pool idempotence": pool_ok,
        "post-filter monotone": post_ok,
        "EM log-likelihood monotone": em_ok,
        "preprocess idempotent": prep_ok,
        "pipeline rerun in place identical": idem_ok,
        "seeded reruns byte-identical": rerun_ok,
    }
    verdict(8, checks, f"{sum(checks.values())}/{len(checks)} invariances hold ({len(a)} artifacts compared by sha256)")


# ----------------------------------------------------------- 9: statistics


def test_criterion_9_statistics():
    h1 = np.array([1] * 5 + [0] * 15 + [1] * 10 + [0] * 10, bool)
    h2 = np.array([0] * 5 + [1] * 15 + [1] * 10 + [0] * 10, bool)
    chi2, p = mcnemar(h1, h2)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        groups = [rng.normal(rng.normal(), 1.0, int(rng.integers(2, 60))) for _ in range(int(rng.integers(2, 6)))]
        allx = np.concatenate(groups)
        ssb = sum(len(g) * (g.mean() - allx.mean()) ** 2 for g in groups)
        ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
        F = (ssb / (len(groups) - 1)) / (ssw / (allx.size - len(groups)))
        worst = max(worst, abs(anova_oneway(groups)[0] - F) / max(1.0, F))
    checks = {
        "chi2 = 4.05": abs(chi2 - 4.05) < 1e-12,
        "p ~ 0.0442": abs(p - 0.0442) < 5e-5,
        "ANOVA oracle 1e-10": worst <= 1e-10,
    }
    verdict(9, checks, f"McNemar chi2 {chi2:.4f} p {p:.4f}; worst ANOVA F deviation {worst:.1e}")
