"""Cleaning pipeline: rare-label filter, consecutive dedupe, length limits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .data import Dataset, PurchaseEvent, Session, UserRecord, Vocabulary


@dataclass
class PreprocessReport:
    removed_items: list[str] = field(default_factory=list)
    removed_item_entries: int = 0
    dropped_purchase_events: int = 0
    removed_labels: dict[str, list[str]] = field(default_factory=lambda: {"section": [], "object": [], "action_type": []})
    removed_actions: int = 0
    deduped_actions: int = 0
    dropped_sessions: int = 0
    dropped_session_actions: int = 0
    truncated_sessions: int = 0
    truncated_actions: int = 0
    passes: int = 0
    input_actions: int = 0
    output_actions: int = 0
    input_sessions: int = 0
    output_sessions: int = 0

    def to_dict(self) -> dict:
        return {k: (sorted(v) if isinstance(v, list) else v) for k, v in vars(self).items()}


def _rare(counts: Counter, total: int, min_freq: float) -> set[str]:
    if total == 0:
        return set()
    return {label for label, n in counts.items() if n / total < min_freq}


def filter_rare(
    ds: Dataset,
    min_freq: float = 0.001,
    cutoff: int | None = None,
    report: PreprocessReport | None = None,
) -> Dataset:
    """Remove items and action labels whose frequency is strictly below `min_freq`.

    Item frequency is the share of purchase events containing the item; label
    frequency is the share of all actions carrying it. Only purchases and
    sessions before `cutoff` (the training portion) are counted. Actions with a
    removed label are deleted; events left without items are dropped.
    """
    if not 0 < min_freq < 1:
        raise ValueError("min_freq must be in (0, 1)")
    report = report if report is not None else PreprocessReport()

    train_events = [e for e in ds.purchases if cutoff is None or e.timestamp < cutoff]
    item_counts = Counter({i: 0 for i in ds.catalog.items})
    item_counts.update(i for e in train_events for i in e.items)
    rare_items = _rare(item_counts, len(train_events), min_freq)

    train_sessions = [s for s in ds.sessions if cutoff is None or s.start_time < cutoff]
    n_actions = sum(len(s) for s in train_sessions)
    rare = {}
    for pos, kind in enumerate(("section", "object", "action_type")):
        c = Counter(a[pos] for s in train_sessions for a in s.actions)
        observed = {a[pos] for s in ds.sessions for a in s.actions}
        c.update({lab: 0 for lab in observed})
        rare[kind] = _rare(c, n_actions, min_freq)

    purchases = []
    for e in ds.purchases:
        kept = tuple(i for i in e.items if i not in rare_items)
        report.removed_item_entries += len(e.items) - len(kept)
        if kept:
            purchases.append(PurchaseEvent(e.user_id, e.timestamp, kept))
        else:
            report.dropped_purchase_events += 1

    sessions = []
    for s in ds.sessions:
        acts = tuple(
            a for a in s.actions
            if a.section not in rare["section"] and a.object not in rare["object"] and a.action_type not in rare["action_type"]
        )
        report.removed_actions += len(s) - len(acts)
        if acts:
            sessions.append(Session(s.session_id, s.user_id, acts))
        else:
            report.dropped_sessions += 1

    report.removed_items.extend(sorted(rare_items))
    for kind, labels in rare.items():
        report.removed_labels[kind].extend(sorted(labels))

    catalog = ds.catalog.restrict(i for i in ds.catalog.items if i not in rare_items)
    users = {
        uid: UserRecord(
            uid,
            u.demographics,
            {k: v for k, v in u.portfolio.items() if k not in rare_items},
            u.demographics_missing,
        )
        for uid, u in ds.users.items()
    }
    vocab = Vocabulary.build((a for s in sessions for a in s.actions), catalog.items)
    return ds.replace(sessions=tuple(sessions), purchases=tuple(purchases), users=users, catalog=catalog, vocabulary=vocab)


def dedupe_consecutive(session: Session) -> Session:
    """Collapse runs of identical (section, object, type) actions to their first occurrence."""
    kept = [session.actions[0]]
    for a in session.actions[1:]:
        if a.key != kept[-1].key:
            kept.append(a)
    if len(kept) == len(session.actions):
        return session
    return Session(session.session_id, session.user_id, tuple(kept))


def drop_short_truncate(
    sessions: Sequence[Session],
    min_actions: int = 3,
    max_actions: int = 30,
    report: PreprocessReport | None = None,
) -> list[Session]:
    """Drop sessions shorter than `min_actions`; keep the first `max_actions` of longer ones."""
    if min_actions > max_actions:
        raise ValueError("min_actions must not exceed max_actions")
    out = []
    for s in sessions:
        if len(s) < min_actions:
            if report is not None:
                report.dropped_sessions += 1
                report.dropped_session_actions += len(s)
            continue
        if len(s) > max_actions:
            if report is not None:
                report.truncated_sessions += 1
                report.truncated_actions += len(s) - max_actions
            s = Session(s.session_id, s.user_id, s.actions[:max_actions])
        out.append(s)
    return out


def _one_pass(ds, min_freq, cutoff, min_actions, max_actions, report):
    ds = filter_rare(ds, min_freq, cutoff, report)
    deduped = []
    for s in ds.sessions:
        d = dedupe_consecutive(s)
        report.deduped_actions += len(s) - len(d)
        deduped.append(d)
    sessions = drop_short_truncate(deduped, min_actions, max_actions, report)
    vocab = Vocabulary.build((a for s in sessions for a in s.actions), ds.catalog.items)
    return ds.replace(sessions=tuple(sessions), vocabulary=vocab)


def preprocess(
    ds: Dataset,
    min_freq: float = 0.001,
    min_actions: int = 3,
    max_actions: int = 30,
    cutoff: int | None = None,
) -> tuple[Dataset, PreprocessReport]:
    """Rare filter -> dedupe -> drop/truncate, repeated until nothing changes.

    Dropping sessions shifts label frequencies, so a single pass is not
    always a fixed point; iterating makes the pipeline idempotent.
    """
    report = PreprocessReport(
        input_actions=sum(len(s) for s in ds.sessions),
        input_sessions=len(ds.sessions),
    )
    while True:
        report.passes += 1
        out = _one_pass(ds, min_freq, cutoff, min_actions, max_actions, report)
        if out.sessions == ds.sessions and out.purchases == ds.purchases and out.catalog == ds.catalog:
            ds = out
            break
        ds = out
    report.output_actions = sum(len(s) for s in ds.sessions)
    report.output_sessions = len(ds.sessions)
    return ds, report
