"""Inter-session inactivity threshold and per-purchase task assembly.

Inter-session gaps (start-to-start, same user) are log-transformed and
modelled as a two-component Gaussian mixture: short gaps between sessions
of one task, long gaps between tasks. The threshold is the gap at which
both components are equally likely.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import PurchaseEvent, Session, UserRecord

DAY = 86400.0
LOG_2PI = math.log(2.0 * math.pi)


class DegenerateMixtureError(ValueError):
    pass


@dataclass(frozen=True)
class Gmm2:
    weights: tuple[float, float]
    means: tuple[float, float]
    stds: tuple[float, float]
    log_likelihood: float = float("nan")  # mean per point
    n_iter: int = 0
    history: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if min(self.stds) <= 0:
            raise ValueError("component standard deviations must be positive")

    def component_log_densities(self, x) -> np.ndarray:
        """(n, 2) array of log(pi_j * N(x; mu_j, sigma_j))."""
        x = np.asarray(x, dtype=float)[:, None]
        w, mu, sd = (np.asarray(v) for v in (self.weights, self.means, self.stds))
        return np.log(w) - np.log(sd) - 0.5 * LOG_2PI - 0.5 * ((x - mu) / sd) ** 2

    def weighted_densities(self, x) -> np.ndarray:
        return np.exp(self.component_log_densities(np.atleast_1d(x)))

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "means": list(self.means),
            "stds": list(self.stds),
            "log_likelihood": self.log_likelihood,
            "n_iter": self.n_iter,
        }


def inter_session_gaps(sessions: Sequence[Session]) -> list[float]:
    """Start-time differences between consecutive sessions of each user.

    Sessions must be grouped by user and sorted by start time within a user.
    """
    gaps: list[float] = []
    prev: Session | None = None
    for s in sessions:
        if prev is not None and prev.user_id == s.user_id:
            gap = s.start_time - prev.start_time
            if gap < 0:
                raise ValueError(
                    f"negative gap between sessions {prev.session_id} and {s.session_id}: input not sorted"
                )
            gaps.append(float(gap))
        prev = s
    return gaps


def log_gaps(gaps: Iterable[float]) -> np.ndarray:
    """Natural log of the strictly positive gaps (zero gaps carry no scale information)."""
    g = np.asarray(list(gaps), dtype=float)
    return np.log(g[g > 0])


# ------------------------------------------------------------------------ EM


def _from_partition(x: np.ndarray, centers: np.ndarray, var_floor: float) -> Gmm2:
    lab = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    w, mu, sd = [], [], []
    for j in range(2):
        xs = x[lab == j]
        if xs.size == 0:
            raise DegenerateMixtureError("initial partition left a component empty")
        w.append(xs.size / x.size)
        mu.append(xs.mean())
        sd.append(xs.std())
    if min(sd) < var_floor:
        raise DegenerateMixtureError(
            f"component collapsed at initialization (sigma={min(sd):.3g} < {var_floor:g}); "
            "data has too few distinct values for a two-component fit, raise the variance floor"
        )
    return Gmm2((w[0], 1.0 - w[0]), tuple(mu), tuple(sd))


def kmeanspp_init(x: np.ndarray, rng: np.random.Generator, var_floor: float = 1e-8) -> Gmm2:
    c0 = x[rng.integers(x.size)]
    d2 = (x - c0) ** 2
    if d2.sum() == 0:
        raise DegenerateMixtureError("all points are equal")
    c1 = x[rng.choice(x.size, p=d2 / d2.sum())]
    return _from_partition(x, np.array(sorted((c0, c1))), var_floor)


def percentile_init(x: np.ndarray, var_floor: float = 1e-8) -> Gmm2:
    return _from_partition(x, np.percentile(x, [25, 75]), var_floor)


def _em(x: np.ndarray, g: Gmm2, tol: float, max_iter: int, var_floor: float) -> Gmm2:
    w = np.array(g.weights, dtype=float)
    mu = np.array(g.means, dtype=float)
    sd = np.array(g.stds, dtype=float)
    n = x.size
    history: list[float] = []

    def log_joint():
        return np.log(w) - np.log(sd) - 0.5 * LOG_2PI - 0.5 * ((x[:, None] - mu) / sd) ** 2

    lj = log_joint()
    ll = float(np.logaddexp(lj[:, 0], lj[:, 1]).mean())
    history.append(ll)
    it = 0
    while it < max_iter:
        it += 1
        norm = np.logaddexp(lj[:, 0], lj[:, 1])
        resp = np.exp(lj - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            raise DegenerateMixtureError("a component lost all responsibility")
        w = nk / n
        w[1] = 1.0 - w[0]
        mu = (resp * x[:, None]).sum(axis=0) / nk
        sd = np.sqrt((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk)
        if sd.min() < var_floor:
            raise DegenerateMixtureError(
                f"component variance collapsed (sigma={sd.min():.3g} < {var_floor:g}); "
                "apply a larger variance floor or remove duplicated points"
            )
        lj = log_joint()
        new_ll = float(np.logaddexp(lj[:, 0], lj[:, 1]).mean())
        # EM never decreases the likelihood; allow for rounding only
        if new_ll < ll - 1e-10 * max(1.0, abs(ll)):
            raise RuntimeError(f"EM log-likelihood decreased at iteration {it}: {ll} -> {new_ll}")
        history.append(new_ll)
        improved = new_ll - ll
        ll = new_ll
        if improved < tol:
            break
    order = np.argsort(mu, kind="stable")
    w, mu, sd = w[order], mu[order], sd[order]
    return Gmm2(
        (float(w[0]), float(1.0 - w[0])),
        (float(mu[0]), float(mu[1])),
        (float(sd[0]), float(sd[1])),
        ll,
        it,
        tuple(history),
    )


def fit_gmm2_em(
    log_gaps,
    init: Gmm2 | None = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    var_floor: float = 1e-8,
    seed: int = 0,
) -> Gmm2:
    """Fit a two-component 1-D Gaussian mixture by expectation maximization.

    Without `init`, EM is run from a k-means++ seeding and from the 25th/75th
    percentile seeding; the fit with the higher likelihood is returned.
    Components are ordered so that ``means[0] <= means[1]``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(log_gaps, dtype=float).ravel()
    if np.unique(x).size < 2:
        raise DegenerateMixtureError("need at least 2 distinct values to fit a two-component mixture")
    if init is not None:
        return _em(x, init, tol, max_iter, var_floor)
    fits, errors = [], []
    for make in (lambda: kmeanspp_init(x, np.random.default_rng(seed), var_floor), lambda: percentile_init(x, var_floor)):
        try:
            fits.append(_em(x, make(), tol, max_iter, var_floor))
        except DegenerateMixtureError as exc:
            errors.append(exc)
    if not fits:
        raise errors[0]
    return max(fits, key=lambda g: g.log_likelihood)


def crossing_point(g: Gmm2) -> float:
    """Log-scale point between the means where both weighted densities are equal."""
    (w1, w2), (m1, m2), (s1, s2) = g.weights, g.means, g.stds
    if not m1 < m2:
        raise ValueError("crossing point requires means[0] < means[1]")
    # log(w1 phi1) - log(w2 phi2) = a x^2 + b x + c
    a = 0.5 / s2**2 - 0.5 / s1**2
    b = m1 / s1**2 - m2 / s2**2
    c = 0.5 * m2**2 / s2**2 - 0.5 * m1**2 / s1**2 + math.log(w1 / s1) - math.log(w2 / s2)
    scale = max(abs(b), 1e-300)
    if abs(a) <= 1e-14 * scale:
        roots = [-c / b]
        disc = b * b
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            raise ValueError(f"weighted densities never cross (discriminant {disc:.6g})")
        sq = math.sqrt(disc)
        q = -0.5 * (b + math.copysign(sq, b))
        roots = [q / a, c / q] if q != 0 else [0.0]
    inside = [r for r in roots if m1 <= r <= m2]
    if not inside:
        raise ValueError(f"no crossing between the means (discriminant {disc:.6g}, roots {roots})")
    x = inside[0]
    # one Newton step polishes the closed form
    f = (a * x + b) * x + c
    df = 2 * a * x + b
    if df != 0:
        x2 = x - f / df
        if m1 <= x2 <= m2:
            x = x2
    return float(x)


def crossing_threshold(g: Gmm2) -> float:
    """Inactivity threshold t (in the original time unit): exp of the crossing point."""
    return math.exp(crossing_point(g))


def gap_histogram(x: np.ndarray, g: Gmm2, bins: int = 50) -> list[dict]:
    """Histogram of log gaps plus each component's expected count per bin."""
    counts, edges = np.histogram(x, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    dens = g.weighted_densities(centers) * x.size * width
    return [
        {
            "left": float(edges[i]),
            "right": float(edges[i + 1]),
            "count": int(counts[i]),
            "component_short": float(dens[i, 0]),
            "component_long": float(dens[i, 1]),
        }
        for i in range(bins)
    ]


# --------------------------------------------------------------------- tasks


@dataclass(frozen=True)
class TaskInstance:
    """Recent sessions of a user preceding one purchase event."""

    user_id: str
    timestamp: int
    sessions: tuple[Session, ...]
    items: tuple[str, ...]
    portfolio: Mapping[str, int] = field(default_factory=dict)
    demographics: tuple[float, ...] = ()
    demographics_missing: bool = False

    @property
    def session_ids(self) -> frozenset[str]:
        return frozenset(s.session_id for s in self.sessions)

    def replace(self, **changes) -> "TaskInstance":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return TaskInstance(**kw)


@dataclass
class AssemblyReport:
    tasks: int = 0
    skipped_no_sessions: int = 0
    sessions_beyond_threshold: int = 0
    truncated_tasks: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


def recent_sessions(prior: Sequence[Session], t: float) -> list[Session]:
    """Walk back from the latest session while consecutive start gaps stay <= t."""
    kept = [prior[-1]]
    for s in reversed(prior[:-1]):
        if kept[-1].start_time - s.start_time > t:
            break
        kept.append(s)
    kept.reverse()
    return kept


def assemble_tasks(
    purchases: Sequence[PurchaseEvent],
    sessions: Sequence[Session],
    users: Mapping[str, UserRecord],
    t: float,
    max_sessions: int = 7,
) -> tuple[list[TaskInstance], AssemblyReport]:
    """One task per purchase event with at least one prior session.

    The inactivity rule is applied first, then the list is cut to the
    `max_sessions` most recent sessions.
    """
    if t <= 0:
        raise ValueError("threshold t must be positive")
    if max_sessions < 1:
        raise ValueError("max_sessions must be >= 1")
    by_user: dict[str, list[Session]] = {}
    for s in sessions:
        by_user.setdefault(s.user_id, []).append(s)
    starts = {}
    for uid, lst in by_user.items():
        lst.sort(key=lambda s: (s.start_time, s.session_id))
        starts[uid] = [s.start_time for s in lst]

    report = AssemblyReport()
    tasks: list[TaskInstance] = []
    for e in sorted(purchases, key=lambda e: (e.timestamp, e.user_id)):
        lst = by_user.get(e.user_id, [])
        n_prior = bisect.bisect_left(starts.get(e.user_id, []), e.timestamp)
        if n_prior == 0:
            report.skipped_no_sessions += 1
            continue
        kept = recent_sessions(lst[:n_prior], t)
        report.sessions_beyond_threshold += n_prior - len(kept)
        if len(kept) > max_sessions:
            kept = kept[-max_sessions:]
            report.truncated_tasks += 1
        u = users.get(e.user_id) or UserRecord(e.user_id, demographics_missing=True)
        tasks.append(
            TaskInstance(
                e.user_id,
                e.timestamp,
                tuple(kept),
                e.items,
                dict(u.portfolio),
                tuple(u.demographics),
                u.demographics_missing,
            )
        )
    report.tasks = len(tasks)
    return tasks, report
