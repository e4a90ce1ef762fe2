"""Temporal split, post-filter, ranking metrics, significance tests, report writing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats
from statsmodels.stats.multitest import multipletests

from .base import rank_items
from .data import NO_OBJECT, Catalog, Session, Vocabulary
from .features import portfolio_matrix, target_matrix
from .sessionize import TaskInstance

log = logging.getLogger(__name__)

MEASURES = ("HR", "Precision", "Recall", "MRR", "MAP")
CUTOFFS = (1, 2, 3, 4, 5)


# -------------------------------------------------------------------- split


def temporal_split(tasks: Sequence[TaskInstance], test_frac: float = 0.10):
    """Latest ceil(test_frac * N) tasks form the test set.

    Ties in purchase time are broken by user id. Training tasks sharing any
    session with a test task are removed.
    """
    n = len(tasks)
    if n < 10:
        raise ValueError(f"need at least 10 tasks for a temporal split, got {n}")
    if not 0 < test_frac < 1:
        raise ValueError("test_frac must be in (0, 1)")
    order = sorted(tasks, key=lambda t: (t.timestamp, t.user_id))
    n_test = math.ceil(round(test_frac * n, 9))
    train, test = order[: n - n_test], order[n - n_test :]
    test_sessions = frozenset().union(*(t.session_ids for t in test))
    train = [t for t in train if not (t.session_ids & test_sessions)]
    return train, test


# --------------------------------------------------------------- post filter


class PostFilter:
    """Zero the score of a coverage item unless the user owns its base product."""

    def __init__(self, catalog: Catalog, vocab: Vocabulary):
        self.base = np.full(vocab.K, -1, dtype=np.int64)
        for cov, b in catalog.base_of.items():
            if vocab.has_item(cov):
                if not vocab.has_item(b):
                    raise ValueError(f"coverage {cov} refers to unknown base product {b}")
                self.base[vocab.item_index(cov)] = vocab.item_index(b)
        self.vocab = vocab

    def apply(self, scores: np.ndarray, portfolio: np.ndarray) -> np.ndarray:
        out = np.array(scores, dtype=float, copy=True)
        for k in np.flatnonzero(self.base >= 0):
            lacks = portfolio[:, self.base[k]] <= 0
            out[lacks, k] = np.minimum(out[lacks, k], 0.0)
        return out

    def __call__(self, scores: np.ndarray, tasks: Sequence[TaskInstance]) -> np.ndarray:
        return self.apply(scores, portfolio_matrix(tasks, self.vocab))


def post_filter(scores: np.ndarray, portfolio: np.ndarray, base: Mapping[int, int]) -> np.ndarray:
    """Functional form: `base` maps coverage item index -> base product index."""
    out = np.array(scores, dtype=float, copy=True)
    for cov, b in base.items():
        lacks = portfolio[:, b] <= 0
        out[lacks, cov] = np.minimum(out[lacks, cov], 0.0)
    return out


# ------------------------------------------------------------------ metrics


def metrics_at_k(ranking: Sequence, relevant: Iterable, k: int) -> dict[str, float]:
    """HR, Precision, Recall, MRR and MAP of one ranked list at cutoff k.

    MAP is truncated average precision normalised by min(|relevant|, k).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = 0
    first = 0
    ap = 0.0
    for r, item in enumerate(list(ranking)[:k], start=1):
        if item in relevant:
            hits += 1
            ap += hits / r
            if not first:
                first = r
    return {
        "HR": float(hits > 0),
        "Precision": hits / k,
        "Recall": hits / len(relevant),
        "MRR": 1.0 / first if first else 0.0,
        "MAP": ap / min(len(relevant), k),
    }


def per_task_metrics(scores: np.ndarray, relevant: np.ndarray, cutoffs: Sequence[int] = CUTOFFS) -> dict[str, np.ndarray]:
    """Vectorised metrics for every task: {"HR@3": (n,), ...}."""
    n, K = scores.shape
    kmax = max(cutoffs)
    ranks = rank_items(scores)[:, :kmax]
    hits = np.take_along_axis(relevant, ranks, axis=1) > 0
    n_rel = relevant.sum(axis=1)
    if np.any(n_rel == 0):
        raise ValueError("every task needs at least one relevant item")
    pos = np.arange(1, hits.shape[1] + 1)
    cum = np.cumsum(hits, axis=1)
    prec_at_r = np.where(hits, cum / pos, 0.0)
    first = np.where(hits.any(axis=1), hits.argmax(axis=1) + 1, 0)
    out = {}
    for k in cutoffs:
        kk = min(k, hits.shape[1])
        h = cum[:, kk - 1] if kk else np.zeros(n)
        out[f"HR@{k}"] = (h > 0).astype(float)
        out[f"Precision@{k}"] = h / k
        out[f"Recall@{k}"] = h / n_rel
        out[f"MRR@{k}"] = np.where((first > 0) & (first <= k), 1.0 / np.maximum(first, 1), 0.0)
        out[f"MAP@{k}"] = prec_at_r[:, :kk].sum(axis=1) / np.minimum(n_rel, k)
    return out


# -------------------------------------------------------------- statistics


def mcnemar(hits1: Sequence[bool], hits2: Sequence[bool]) -> tuple[float, float]:
    """Continuity-corrected McNemar chi-square on the discordant pairs."""
    a = np.asarray(hits1, dtype=bool)
    b_ = np.asarray(hits2, dtype=bool)
    if a.shape != b_.shape:
        raise ValueError("hit vectors must have equal length")
    b = int(np.sum(a & ~b_))
    c = int(np.sum(~a & b_))
    if b + c == 0:
        return 0.0, 1.0
    stat = (abs(b - c) - 1) ** 2 / (b + c)
    return float(stat), float(stats.chi2.sf(stat, 1))


def anova_oneway(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """One-way ANOVA F statistic and p-value."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2 or any(g.size < 2 for g in groups):
        raise ValueError("need at least 2 groups of at least 2 values")
    allx = np.concatenate(groups)
    grand = allx.mean()
    k, n = len(groups), allx.size
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    if ssw == 0:
        if ssb == 0:
            return 0.0, 1.0
        log.warning("zero within-group variance in all groups; reporting p = 0")
        return math.inf, 0.0
    F = (ssb / (k - 1)) / (ssw / (n - k))
    return float(F), float(stats.f.sf(F, k - 1, n - k))


def holm(pvalues: Sequence[float]) -> np.ndarray:
    if len(pvalues) == 0:
        return np.array([])
    return multipletests(pvalues, method="holm")[1]


def paired_posthoc(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    d = np.asarray(x) - np.asarray(y)
    if np.all(d == d[0]):
        return (0.0, 1.0) if d[0] == 0 else (math.inf, 0.0)
    res = stats.ttest_rel(x, y)
    return float(res.statistic), float(res.pvalue)


# ------------------------------------------------------------------- report


@dataclass
class EvalReport:
    models: list[str]
    per_task: dict[str, dict[str, np.ndarray]]
    tasks: list[TaskInstance] = field(default_factory=list, repr=False)
    significance: list[dict] = field(default_factory=list)
    anova: list[dict] = field(default_factory=list)

    def mean(self, model: str, key: str) -> float:
        return float(self.per_task[model][key].mean())

    def table(self, cutoffs: Sequence[int] = CUTOFFS) -> list[dict]:
        rows = []
        for m in self.models:
            row = {"model": m}
            for meas in MEASURES:
                for k in cutoffs:
                    row[f"{meas}@{k}"] = self.mean(m, f"{meas}@{k}")
            rows.append(row)
        return rows


def evaluate(
    scores: Mapping[str, np.ndarray],
    tasks: Sequence[TaskInstance],
    vocab: Vocabulary,
    post: PostFilter | None = None,
    reference: str | None = None,
    k: int = 3,
    alpha: float = 0.05,
) -> EvalReport:
    """Metrics for every model on the same tasks, plus significance against `reference`."""
    relevant = target_matrix(tasks, vocab)
    per_task = {}
    portfolio = portfolio_matrix(tasks, vocab) if post is not None else None
    for name, s in scores.items():
        if s.shape != relevant.shape:
            raise ValueError(f"{name}: scores have shape {s.shape}, expected {relevant.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"{name}: non-finite scores")
        if post is not None:
            s = post.apply(s, portfolio)
        per_task[name] = per_task_metrics(s, relevant)
    report = EvalReport(list(scores), per_task, list(tasks))
    if len(scores) >= 2:
        significance_tests(report, reference, k, alpha)
    return report


def significance_tests(report: EvalReport, reference: str | None, k: int = 3, alpha: float = 0.05) -> None:
    """McNemar for HR, one-way ANOVA with paired post hoc tests for the rest; Holm within each measure."""
    ref = reference if reference in report.models else report.models[0]
    others = [m for m in report.models if m != ref]
    for meas in MEASURES:
        key = f"{meas}@{k}"
        if meas != "HR" and all(report.per_task[m][key].size >= 2 for m in report.models):
            F, p = anova_oneway([report.per_task[m][key] for m in report.models])
            report.anova.append({"measure": key, "F": F, "p": p})
        raw = []
        for m in others:
            a, b = report.per_task[ref][key], report.per_task[m][key]
            stat, p = mcnemar(a > 0, b > 0) if meas == "HR" else paired_posthoc(a, b)
            raw.append((m, stat, p))
        adj = holm([p for _, _, p in raw])
        for (m, stat, p), pa in zip(raw, adj):
            report.significance.append({
                "measure": key,
                "reference": ref,
                "model": m,
                "test": "mcnemar" if meas == "HR" else "paired-t",
                "statistic": stat,
                "p": p,
                "p_holm": float(pa),
                "significant": bool(pa < alpha),
            })


def _fmt(x: float) -> str:
    return f"{x:.6f}" if math.isfinite(x) else str(x)


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def cutoff_rows(report: EvalReport) -> list[dict]:
    return [
        {"model": m, "measure": meas, "k": k, "value": report.mean(m, f"{meas}@{k}")}
        for m in report.models
        for meas in MEASURES
        for k in CUTOFFS
    ]


def summary_markdown(report: EvalReport, k: int = 3, reference: str | None = None) -> str:
    sig = {(r["model"], r["measure"]) for r in report.significance if r["significant"]}
    head = [f"{m}@{k}" for m in MEASURES]
    lines = ["| Model | " + " | ".join(head) + " |", "|---|" + "---:|" * len(head)]
    best = {h: max(report.mean(m, h) for m in report.models) for h in head}
    for m in report.models:
        cells = []
        for h in head:
            v = report.mean(m, h)
            cell = f"{v:.4f}" + ("*" if (m, h) in sig else "")
            cells.append(f"**{cell}**" if v == best[h] else cell)
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    ref = report.significance[0]["reference"] if report.significance else reference
    if ref:
        lines.append("")
        lines.append(f"`*` significantly different from {ref} (Holm-adjusted, alpha 0.05).")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir, k: int = 3) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = report.table()
    write_csv(out / "metrics.csv", rows)
    write_csv(
        out / "significance.csv",
        report.significance,
        ["measure", "reference", "model", "test", "statistic", "p", "p_holm", "significant"],
    )
    write_csv(out / "anova.csv", report.anova, ["measure", "F", "p"])
    write_csv(out / "cutoffs.csv", cutoff_rows(report), ["model", "measure", "k", "value"])
    (out / "summary.md").write_text(summary_markdown(report, k))


# ----------------------------------------------------------------- analyses


def breakdown_rows(report: EvalReport, key: str = "HR@3", action_bins=(3, 5, 10, 15, 20, 25, 31)) -> list[dict]:
    """Mean `key` grouped by number of recent sessions and by mean actions per session."""
    tasks = report.tasks
    n_sess = np.array([len(t.sessions) for t in tasks])
    mean_actions = np.array([np.mean([len(s) for s in t.sessions]) if t.sessions else 0.0 for t in tasks])
    rows = []
    for m in report.models:
        v = report.per_task[m][key]
        for n in range(1, int(n_sess.max(initial=0)) + 1):
            sel = n_sess == n
            if sel.any():
                rows.append({"model": m, "group": "sessions", "bin": str(n), "n_tasks": int(sel.sum()), "value": float(v[sel].mean())})
        for lo, hi in zip(action_bins[:-1], action_bins[1:]):
            sel = (mean_actions >= lo) & (mean_actions < hi)
            if sel.any():
                rows.append({"model": m, "group": "actions", "bin": f"[{lo},{hi})", "n_tasks": int(sel.sum()), "value": float(v[sel].mean())})
    return rows


def remove_actions(tasks: Sequence[TaskInstance], drop: Callable) -> list[TaskInstance]:
    """Delete actions for which ``drop(action)`` is true; emptied sessions disappear.

    Tasks are kept even if no session remains, so ablated runs are evaluated
    on the same purchase events.
    """
    out = []
    for t in tasks:
        sessions = []
        for s in t.sessions:
            acts = tuple(a for a in s.actions if not drop(a))
            if len(acts) == len(s.actions):
                sessions.append(s)
            elif acts:
                sessions.append(Session(s.session_id, s.user_id, acts))
        out.append(t.replace(sessions=tuple(sessions)))
    return out


def ablation_groups(vocab: Vocabulary) -> dict[str, Callable]:
    """Named action groups for the ablation study; clicks are never ablated."""
    items = set(vocab.items)
    groups: dict[str, Callable] = {}
    for sec in vocab.sections:
        groups[f"section:{sec}"] = lambda a, sec=sec: a.section == sec
    groups["object:items"] = lambda a: a.object in items
    groups["object:services"] = lambda a: a.object not in items and a.object != NO_OBJECT
    for typ in ("start", "act", "complete"):
        groups[f"type:{typ}"] = lambda a, typ=typ: a.action_type == typ
    return groups


def shuffle_sessions(tasks: Sequence[TaskInstance], rng: np.random.Generator) -> list[TaskInstance]:
    out = []
    for t in tasks:
        order = rng.permutation(len(t.sessions))
        out.append(t.replace(sessions=tuple(t.sessions[i] for i in order)))
    return out


def relative_change(new: float, old: float) -> float:
    return (new - old) / old if old else 0.0
