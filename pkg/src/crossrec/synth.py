"""Synthetic insurance-site logs with a plantable purchase rule.

Each user gets one purchase. The sessions right before it are separated by
short gaps (a few hours), older sessions by long gaps (weeks). With
probability `rule_strength` every purchased item leaves e-commerce actions
on its own object in those recent sessions. Background actions only touch
services or carry no object, so item objects are the only signal unless
`noise` adds distractor items. The "complete" type is only ever used on
services and is independent of the purchase.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import (
    NO_OBJECT,
    SECTIONS,
    Action,
    Catalog,
    Dataset,
    PurchaseEvent,
    Session,
    UserRecord,
    Vocabulary,
    export_dataset,
)

HOUR = 3600.0
DAY = 86400.0
EPOCH = 1_483_228_800  # 2017-01-01T00:00:00Z

SERVICES = {
    "claims-reporting": ("claim-form", "claim-status", "damage-photos"),
    "information": ("faq", "contact", "terms", "branch-finder"),
    "personal-account": ("documents", "address-change", "payment-details"),
}


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_users: int = Field(2000, ge=1)
    n_items: int = Field(8, ge=2)
    n_coverages: int = Field(2, ge=0)
    sessions_mean: float = Field(3.0, gt=1.0)
    task_sessions_extra: float = Field(1.0, ge=0.0)
    max_task_sessions: int = Field(7, ge=1)
    actions_mean: float = Field(10.72, gt=1.0)
    actions_std: float = Field(7.85, gt=0.0)
    short_gap_mu: float = math.log(4 * HOUR)
    short_gap_sigma: float = Field(0.8, gt=0.0)
    long_gap_mu: float = math.log(30 * DAY)
    long_gap_sigma: float = Field(0.8, gt=0.0)
    rule_strength: float = Field(1.0, ge=0.0, le=1.0)
    plant_prob: float = Field(0.7, ge=0.0, le=1.0)
    noise: float = Field(0.2, ge=0.0, le=1.0)
    second_item_prob: float = Field(0.15, ge=0.0, le=1.0)
    popularity_exponent: float = 0.7
    demographic_effect: float = 0.5
    n_demographics: int = Field(4, ge=0)
    missing_demographics_prob: float = Field(0.05, ge=0.0, le=1.0)
    own_base_prob: float = Field(0.35, ge=0.0, le=1.0)
    span_days: float = Field(730.0, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.n_coverages >= self.n_items:
            raise ValueError("need at least one base product")
        if self.actions_std**2 <= self.actions_mean - 1:
            raise ValueError("actions_std too small for the action-count distribution")
        return self


def item_names(cfg: SynthConfig) -> list[str]:
    return [f"item{i}" for i in range(cfg.n_items)]


def coverage_bases(cfg: SynthConfig) -> dict[str, str]:
    """Coverage items are the last `n_coverages`; each extends a base product round-robin."""
    names = item_names(cfg)
    n_base = cfg.n_items - cfg.n_coverages
    return {names[n_base + j]: names[j % n_base] for j in range(cfg.n_coverages)}


def _action_count(rng: np.random.Generator, cfg: SynthConfig) -> int:
    """1 + negative binomial, matching the configured mean and std exactly."""
    m = cfg.actions_mean - 1
    p = m / cfg.actions_std**2
    r = m * p / (1 - p)
    return 1 + int(rng.negative_binomial(r, p))


def _background(rng: np.random.Generator) -> tuple[str, str, str]:
    sec = SECTIONS[rng.integers(len(SECTIONS))]
    if sec == "e-commerce" or rng.random() < 0.3:
        obj = NO_OBJECT
    else:
        svc = SERVICES[sec]
        obj = svc[rng.integers(len(svc))]
    u = rng.random()
    if u < 0.7:
        typ = "click"
    elif u < 0.8:
        typ = "start"
    elif u < 0.9:
        typ = "act"
    else:
        typ = "complete" if obj != NO_OBJECT else "click"
    return sec, obj, typ


def _item_block(item: str) -> list[tuple[str, str, str]]:
    return [("e-commerce", item, "click"), ("e-commerce", item, "start"), ("e-commerce", item, "act")]


def _session(rng, cfg, sid, uid, start, n, planted: list[str]) -> Session:
    labels = [_background(rng) for _ in range(n)]
    # disjoint slots inside the first 30 actions, so blocks survive truncation
    width = 3
    free = min(n, 30) - width * len(planted)
    cuts = np.sort(rng.integers(0, free + 1, size=len(planted)))
    for j, item in enumerate(planted):
        pos = int(cuts[j]) + width * j
        labels[pos : pos + width] = _item_block(item)
    t = start
    acts = []
    for lab in labels:
        acts.append(Action(*lab, int(t)))
        t += 1 + rng.exponential(40.0)
    return Session(sid, uid, tuple(acts))


def _user(idx: int, cfg: SynthConfig, pref: np.ndarray, base_of: dict[str, str]):
    rng = np.random.default_rng([cfg.seed, idx])
    uid = f"u{idx:06d}"
    names = item_names(cfg)
    n_base = cfg.n_items - cfg.n_coverages

    demo = rng.standard_normal(cfg.n_demographics)
    missing = bool(rng.random() < cfg.missing_demographics_prob)
    portfolio = {}
    for j in range(n_base):
        if rng.random() < cfg.own_base_prob:
            portfolio[names[j]] = 1
    for cov, base in base_of.items():
        if base in portfolio and rng.random() < 0.1:
            portfolio[cov] = 1

    # purchase: popularity tilted by demographics; coverages need their base
    logits = pref[0] + cfg.demographic_effect * (demo @ pref[1:]) if cfg.n_demographics else pref[0].copy()
    allowed = np.array([n not in base_of or base_of[n] in portfolio for n in names])
    w = np.where(allowed, np.exp(logits - logits.max()), 0.0)
    n_buy = 1 + int(rng.random() < cfg.second_item_prob and allowed.sum() > 1)
    bought = rng.choice(cfg.n_items, size=n_buy, replace=False, p=w / w.sum())
    items = sorted((names[i] for i in bought), key=lambda s: int(s[4:]))
    planted_items = [it for it in items if rng.random() < cfg.rule_strength]

    m = min(cfg.max_task_sessions, 1 + int(rng.poisson(cfg.task_sessions_extra)))
    h = int(rng.poisson(max(0.0, cfg.sessions_mean - 1 - cfg.task_sessions_extra)))
    counts = [_action_count(rng, cfg) for _ in range(h + m)]

    t_purchase = EPOCH + 30 * DAY + rng.random() * cfg.span_days * DAY
    # session starts backwards from the purchase
    starts = []
    t = t_purchase - rng.exponential(HOUR) - 600
    for k in range(h + m):
        starts.append(t)
        if k < m - 1:
            gap = rng.lognormal(cfg.short_gap_mu, cfg.short_gap_sigma)
        else:
            gap = rng.lognormal(cfg.long_gap_mu, cfg.long_gap_sigma)
        t -= gap + counts[k] * 60
    starts.reverse()
    counts.reverse()
    task_idx = range(h, h + m)

    plan: dict[int, list[str]] = {k: [] for k in range(h + m)}
    long_enough = [k for k in task_idx if counts[k] >= 3]
    if planted_items and not long_enough:
        counts[h + m - 1] = 3
        long_enough = [h + m - 1]
    for it in planted_items:
        chosen = [k for k in long_enough if rng.random() < cfg.plant_prob]
        if not chosen:
            chosen = [long_enough[-1]]
        for k in chosen:
            plan[k].append(it)
    others = [n for n in names if n not in items]
    for k in range(h + m):
        if others and counts[k] >= 3 and rng.random() < cfg.noise:
            plan[k].append(others[rng.integers(len(others))])
    for k in plan:
        need = 3 * len(plan[k])
        if counts[k] < need:
            counts[k] = need

    sessions = [
        _session(rng, cfg, f"{uid}-s{k:02d}", uid, starts[k], counts[k], plan[k])
        for k in range(h + m)
    ]
    user = UserRecord(uid, tuple(float(x) for x in (np.zeros_like(demo) if missing else demo)), portfolio, missing)
    return sessions, PurchaseEvent(uid, int(t_purchase), tuple(items)), user


def generate_dataset(cfg: SynthConfig) -> Dataset:
    """Deterministic in-memory dataset for `cfg`."""
    prng = np.random.default_rng([cfg.seed, 2**31])
    ranks = prng.permutation(cfg.n_items)
    pref = np.vstack([
        -cfg.popularity_exponent * np.log1p(ranks),
        prng.standard_normal((cfg.n_demographics, cfg.n_items)),
    ])
    base_of = coverage_bases(cfg)
    sessions, purchases, users = [], [], {}
    for i in range(cfg.n_users):
        s, p, u = _user(i, cfg, pref, base_of)
        sessions.extend(s)
        purchases.append(p)
        users[u.user_id] = u
    catalog = Catalog(tuple(item_names(cfg)), base_of)
    vocab = Vocabulary.build((a for s in sessions for a in s.actions), catalog.items)
    return Dataset(
        tuple(sessions),
        tuple(purchases),
        users,
        catalog,
        vocab,
        tuple(f"demo{j}" for j in range(cfg.n_demographics)),
    )


def generate(cfg: SynthConfig, out_dir) -> Path:
    """Write sessions.csv, purchases.csv, users.csv and catalog.csv to `out_dir`."""
    out = Path(out_dir)
    export_dataset(generate_dataset(cfg), out)
    (out / "synth_config.json").write_text(cfg.model_dump_json(indent=2))
    return out
