from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from crossrec.data import PurchaseEvent, UserRecord
from crossrec.sessionize import (
    DAY,
    DegenerateMixtureError,
    Gmm2,
    _em,
    assemble_tasks,
    crossing_point,
    crossing_threshold,
    fit_gmm2_em,
    gap_histogram,
    inter_session_gaps,
    log_gaps,
)

from conftest import session

LAB = [("e-commerce", "A", "click")]


def _sessions(user_starts: dict[str, list[float]]):
    return [session(f"{u}-{i}", u, LAB, start=int(t)) for u, starts in user_starts.items() for i, t in enumerate(starts)]


# ---------------------------------------------------------------------- gaps


def test_gaps_examples():
    assert inter_session_gaps(_sessions({"u": [0, 3600]})) == [3600]
    assert inter_session_gaps(_sessions({"u": [0]})) == []
    assert inter_session_gaps(_sessions({"a": [0, 100], "b": [0, 50, 60]})) == [100, 50, 10]


def test_gaps_unsorted_raise():
    with pytest.raises(ValueError, match="negative gap"):
        inter_session_gaps(_sessions({"u": [100, 0]}))


def test_log_gaps_drop_zero():
    assert log_gaps([0, 1, math.e]).tolist() == [0.0, 1.0]


# ------------------------------------------------------------------------ EM


def _mixture(n=20_000, seed=0):
    rng = np.random.default_rng(seed)
    comp = rng.random(n) < 0.5
    return np.where(comp, rng.normal(0, 1, n), rng.normal(6, 1, n))


def _multistart_oracle(x, restarts=50, seed=1):
    """Best of many EM runs from random two-point partitions."""
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        c = np.sort(rng.choice(x, 2, replace=False))
        if c[0] == c[1]:
            continue
        lab = np.abs(x - c[0]) > np.abs(x - c[1])
        w0 = 1 - lab.mean()
        g0 = Gmm2((w0, 1 - w0), (x[~lab].mean(), x[lab].mean()), (x[~lab].std(), x[lab].std()))
        g = _em(x, g0, 1e-10, 2000, 1e-8)
        if best is None or g.log_likelihood > best.log_likelihood:
            best = g
    return best


def test_em_recovers_separated_mixture():
    x = _mixture()
    g = fit_gmm2_em(x)
    assert -0.1 <= g.means[0] <= 0.1
    assert 5.9 <= g.means[1] <= 6.1
    assert 0.48 <= g.weights[0] <= 0.52
    oracle = _multistart_oracle(x)
    assert g.log_likelihood >= oracle.log_likelihood - 1e-7
    np.testing.assert_allclose(g.means, oracle.means, atol=1e-3)
    np.testing.assert_allclose(g.stds, oracle.stds, atol=1e-3)


def test_em_log_likelihood_monotone():
    g = fit_gmm2_em(_mixture(3000, seed=4))
    h = np.array(g.history)
    assert np.all(np.diff(h) >= -1e-12)
    assert g.means[0] <= g.means[1]
    assert abs(sum(g.weights) - 1) <= 1e-12


def test_em_degenerate_inputs():
    with pytest.raises(DegenerateMixtureError):
        fit_gmm2_em(np.r_[np.zeros(50), 1.0, 2.0])
    with pytest.raises(DegenerateMixtureError):
        fit_gmm2_em(np.ones(10))
    with pytest.raises(ValueError):
        fit_gmm2_em(_mixture(100), tol=0)


def test_em_fixed_point_of_symmetric_two_spikes():
    rng = np.random.default_rng(3)
    spike = rng.normal(0, 0.05, 500)
    x = np.r_[spike - 2, 2 - spike]
    g = fit_gmm2_em(x, tol=1e-12, max_iter=5000)
    again = fit_gmm2_em(x, init=g, tol=1e-8)
    assert again.n_iter <= 2
    np.testing.assert_allclose(again.means, g.means, atol=1e-9)


def test_em_location_equivariance():
    """Scaling gaps by c shifts the log-gaps and the fitted means by ln c."""
    gaps = np.exp(_mixture(4000, seed=7))
    g1 = fit_gmm2_em(np.log(gaps))
    g2 = fit_gmm2_em(np.log(gaps * 60.0))
    np.testing.assert_allclose(np.array(g2.means) - np.array(g1.means), math.log(60.0), atol=1e-6)
    np.testing.assert_allclose(g2.stds, g1.stds, atol=1e-6)


# ------------------------------------------------------------------ crossing


def _bisect(g: Gmm2, tol=1e-14):
    f = lambda x: g.weights[0] * norm.pdf(x, g.means[0], g.stds[0]) - g.weights[1] * norm.pdf(x, g.means[1], g.stds[1])
    lo, hi = g.means
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (f(lo) > 0) == (f(mid) > 0):
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def test_crossing_symmetric_midpoint_exact():
    g = Gmm2((0.5, 0.5), (0.0, 2.0), (1.0, 1.0))
    assert crossing_point(g) == 1.0
    assert crossing_threshold(g) == math.exp(1.0)


def test_crossing_matches_bisection():
    g = Gmm2((0.6, 0.4), (0.5, 2.5), (0.3, 0.4))
    x = crossing_point(g)
    assert abs(x - _bisect(g)) < 1e-9
    d = g.weighted_densities(x)[0]
    assert abs(d[0] - d[1]) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.05, 0.95),
    st.floats(-3, 3),
    st.floats(0.5, 6),
    st.floats(0.2, 2),
    st.floats(0.2, 2),
)
def test_crossing_property(w, m1, delta, s1, s2):
    g = Gmm2((w, 1 - w), (m1, m1 + delta), (s1, s2))
    try:
        x = crossing_point(g)
    except ValueError as exc:
        # only when the weighted densities never cross between the means
        lo, hi = g.weighted_densities(np.array(g.means))
        assert (lo[0] - lo[1]) * (hi[0] - hi[1]) > 0, exc
        return
    assert g.means[0] <= x <= g.means[1]
    d = g.weighted_densities(x)[0]
    assert abs(d[0] - d[1]) < 1e-9


def test_crossing_extreme_imbalance_reports_discriminant():
    g = Gmm2((0.999, 0.001), (0.0, 1.0), (1.0, 1.0))
    with pytest.raises(ValueError, match="discriminant"):
        crossing_point(g)


def test_threshold_from_bimodal_log_gaps():
    rng = np.random.default_rng(0)
    x = np.r_[rng.normal(math.log(4 * 3600), 0.8, 3000), rng.normal(math.log(30 * DAY), 0.8, 3000)]
    t = crossing_threshold(fit_gmm2_em(x))
    assert 4 * 3600 < t < 30 * DAY


def test_histogram_shape():
    x = _mixture(1000)
    rows = gap_histogram(x, fit_gmm2_em(x), 20)
    assert len(rows) == 20 and sum(r["count"] for r in rows) == 1000
    assert abs(sum(r["component_short"] + r["component_long"] for r in rows) - 1000) < 50


# ------------------------------------------------------------------ assembly


def _assemble(days, purchase_day, t_days=10, max_sessions=7):
    sessions = _sessions({"u": [d * DAY for d in days]})
    users = {"u": UserRecord("u", (1.0,), {"A": 1})}
    return assemble_tasks([PurchaseEvent("u", int(purchase_day * DAY), ("A",))], sessions, users, t_days * DAY, max_sessions)


def _start_days(task):
    return [s.start_time / DAY for s in task.sessions]


def test_assemble_chain_break():
    tasks, rep = _assemble([0, 5, 30], 31)
    assert _start_days(tasks[0]) == [30]
    assert rep.sessions_beyond_threshold == 2


def test_assemble_chain_intact():
    tasks, _ = _assemble([0, 8, 16, 24], 25)
    assert _start_days(tasks[0]) == [0, 8, 16, 24]


def test_assemble_caps_recent_sessions():
    tasks, rep = _assemble(list(range(9)), 9.5)
    assert _start_days(tasks[0]) == list(range(2, 9))
    assert rep.truncated_tasks == 1


def test_assemble_skips_purchase_without_sessions():
    tasks, rep = _assemble([5], 4)
    assert tasks == [] and rep.skipped_no_sessions == 1


def test_assemble_rejects_bad_threshold():
    with pytest.raises(ValueError):
        _assemble([0], 1, t_days=0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(0, 60 * 24), min_size=1, max_size=15, unique=True),
    st.integers(0, 60 * 24 + 10),
    st.integers(1, 72),
    st.integers(1, 7),
)
def test_assemble_invariants(starts_hours, purchase_hour, t_hours, cap):
    sessions = _sessions({"u": [h * 3600 for h in sorted(starts_hours)]})
    tasks, _ = assemble_tasks(
        [PurchaseEvent("u", purchase_hour * 3600, ("A",))], sessions, {}, t_hours * 3600.0, cap
    )
    for task in tasks:
        starts = [s.start_time for s in task.sessions]
        assert 1 <= len(starts) <= cap
        assert starts == sorted(starts)
        assert all(b - a <= t_hours * 3600 for a, b in zip(starts, starts[1:]))
        assert all(s < task.timestamp for s in starts)
        assert task.demographics_missing
