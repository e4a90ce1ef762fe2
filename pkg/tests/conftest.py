from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from crossrec.data import ACTION_TYPES, SECTIONS, Action, Session, Vocabulary
from crossrec.sessionize import DAY, TaskInstance


def write_rows(path: Path, header, rows) -> Path:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def session(sid, uid, labels, start=0, step=10) -> Session:
    return Session(sid, uid, tuple(Action(*lab, start + j * step) for j, lab in enumerate(labels)))


def task(uid, ts, sessions, items, portfolio=None, demo=(0.0, 0.0), missing=False) -> TaskInstance:
    return TaskInstance(uid, ts, tuple(sessions), tuple(items), dict(portfolio or {}), tuple(demo), missing)


@pytest.fixture
def small_vocab() -> Vocabulary:
    objects = ("A", "B", "C", "svc", "no-object")
    return Vocabulary(SECTIONS, objects, ACTION_TYPES, ("A", "B", "C"))


def random_task(rng: np.random.Generator, vocab: Vocabulary, uid: str, ts: int, max_sessions=3, max_actions=4) -> TaskInstance:
    sessions = []
    for j in range(int(rng.integers(1, max_sessions + 1))):
        labels = [
            (
                vocab.sections[rng.integers(len(vocab.sections))],
                vocab.objects[rng.integers(len(vocab.objects))],
                vocab.action_types[rng.integers(len(vocab.action_types))],
            )
            for _ in range(int(rng.integers(1, max_actions + 1)))
        ]
        sessions.append(session(f"{uid}-{j}", uid, labels, start=ts - int(DAY) + j * 100))
    n_items = int(rng.integers(1, min(2, vocab.K) + 1))
    items = tuple(sorted(rng.choice(vocab.items, size=n_items, replace=False)))
    portfolio = {i: int(rng.integers(0, 3)) for i in vocab.items}
    return task(uid, ts, sessions, items, {k: v for k, v in portfolio.items() if v}, tuple(rng.standard_normal(2)))


@pytest.fixture
def random_tasks(small_vocab):
    rng = np.random.default_rng(0)
    return [random_task(rng, small_vocab, f"u{i:03d}", 10_000_000 + i * 1000) for i in range(40)]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, status: str, detail: str) -> str:
    line = f"criterion {criterion}: {status} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
