import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from stgnpp import kernels
from stgnpp import synthgen as sg
from stgnpp.synthgen import CongestionEvent, GroundTruthIntensity


# --- independent oracles ------------------------------------------------------

def union_find_components(n, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        parent[find(a)] = find(b)
    return len({find(i) for i in range(n)})


def slot_overlap_labels(events, n_slots):
    out = np.zeros((len(events), n_slots), dtype=np.int8)
    for n, evs in enumerate(events):
        for s in range(n_slots):
            lo, hi = 5.0 * s, 5.0 * s + 5.0
            out[n, s] = any(e.t_occ < hi and e.t_occ + e.duration > lo for e in evs)
    return out


def brute_intensity(t, mu, profile, beta, gamma, nbr_onsets, busy):
    """Vectorised intensity on a time grid (hours), written independently of the kernels."""
    t = np.asarray(t, dtype=np.float64)
    k = np.floor(t * 12.0).astype(np.int64) % 288
    exc = np.zeros_like(t)
    for s in nbr_onsets:
        exc += np.where(t > s, np.exp(-gamma * np.clip(t - s, 0, None)), 0.0)
    lam = mu * profile[k] * (1.0 + beta * exc)
    for a, b in busy:
        lam = np.where((t > a) & (t <= b), 0.0, lam)
    return lam


def trapezoid_hazard(a, b, lam_fn, breaks, n=10_000):
    """Trapezoid with n points on each smooth piece between breakpoints."""
    cuts = sorted({a, b, *[x for x in breaks if a < x < b]})
    total = 0.0
    for lo, hi in zip(cuts, cuts[1:]):
        # stay strictly inside the piece so the left-continuous jumps are not sampled
        eps = (hi - lo) * 1e-9
        ts = np.linspace(lo + eps, hi - eps, n)
        total += np.trapezoid(lam_fn(ts), ts) + eps * (lam_fn(ts[:1])[0] + lam_fn(ts[-1:])[0])
    return total


# --- graph --------------------------------------------------------------------

def test_single_link_graph_is_self_loop():
    g = sg.gen_graph(1, 0.0, 0)
    assert g.adjacency.tolist() == [[1.0]]
    assert g.edges == ()


def test_graph_is_deterministic_per_seed():
    assert sg.gen_graph(5, 2, 11).edges == sg.gen_graph(5, 2, 11).edges


def test_graph_50_links_connected():
    g = sg.gen_graph(50, 3, 4)
    assert union_find_components(50, g.edges) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.floats(0.5, 6.0), st.integers(0, 10_000))
def test_adjacency_invariants(n, deg, seed):
    deg = min(deg, n - 1 - 1e-9)
    g = sg.gen_graph(n, deg, seed)
    A = g.adjacency
    assert np.allclose(A.sum(axis=1), 1.0)
    edge_set = set(g.edges)
    for i in range(n):
        for j in range(n):
            assert (A[i, j] > 0) == ((i, j) in edge_set or i == j)
    assert all((b, a) in edge_set for a, b in edge_set)


def test_graph_rejects_bad_parameters():
    with pytest.raises(sg.ParameterError):
        sg.gen_graph(5, 5, 0)
    with pytest.raises(sg.ParameterError):
        sg.gen_graph(0, 0.5, 0)


@pytest.mark.parametrize("kw", [dict(mu=0.0), dict(beta=-0.1), dict(gamma=0.0)])
def test_intensity_rejects_invalid(kw):
    g = sg.gen_graph(3, 1, 0)
    args = dict(mu=1.0, beta=0.0, gamma=1.0) | kw
    with pytest.raises(sg.ParameterError):
        GroundTruthIntensity.for_graph(g, args["mu"], beta=args["beta"], gamma=args["gamma"])


def test_profiles():
    flat = sg.flat_profile()
    assert flat.shape == (288,) and np.all(flat == 1.0)
    peak = sg.peak_profile(2.0)
    hours = np.arange(288) / 12
    assert np.all(peak[(hours >= 7) & (hours < 10)] == 2.0)
    assert np.all(peak[(hours >= 17) & (hours < 20)] == 2.0)
    assert np.all(peak[(hours < 7)] == 1.0)


# --- simulation -----------------------------------------------------------------

def _homogeneous(n_links, mu, seed, horizon):
    g = sg.gen_graph(n_links, min(2, n_links - 1) if n_links > 1 else 0, seed)
    gt = GroundTruthIntensity.for_graph(g, mu, sg.flat_profile(), beta=0.0)
    return g, gt, sg.simulate_events(g, gt, horizon, seed)


def gaps_hours(events):
    return np.array([(b.t_occ - a.end) / 60.0 for evs in events for a, b in zip(evs, evs[1:])])


def test_homogeneous_mean_gap_is_30_minutes():
    _, _, events = _homogeneous(4, 2.0, 3, 1000.0)
    gaps = gaps_hours(events)
    assert len(gaps) >= 1000
    assert abs(gaps.mean() * 60.0 - 30.0) / 30.0 < 0.03


def test_homogeneous_gaps_pass_ks_against_exponential():
    _, _, events = _homogeneous(2, 2.0, 5, 1000.0)
    gaps = gaps_hours(events)
    res = stats.kstest(gaps, "expon", args=(0, 1 / 2.0))
    assert res.pvalue > 0.01


def test_vanishing_rate_gives_no_events():
    _, _, events = _homogeneous(3, 1e-9, 0, 24.0)
    assert sum(len(e) for e in events) == 0


def test_counts_in_disjoint_hours_uncorrelated():
    # blocking couples neighbouring hours, so probe the bare sampler
    g = sg.gen_graph(1, 0, 0)
    gt = GroundTruthIntensity.for_graph(g, 2.0, blocking=False)
    events = sg.simulate_events(g, gt, 10_000.0, 9, dur_median_min=1e-3)
    onsets = np.array([e.t_occ / 60.0 for e in events[0]])
    counts = np.bincount(onsets.astype(np.int64), minlength=10_000)[:10_000]
    r = np.corrcoef(counts[:-1], counts[1:])[0, 1]
    assert abs(r) < 0.05


def test_events_ordered_and_non_overlapping():
    g = sg.gen_graph(6, 2, 1)
    gt = GroundTruthIntensity.for_graph(g, 1.5, sg.peak_profile(), beta=0.5, gamma=2.0)
    events = sg.simulate_events(g, gt, 200.0, 2)
    for evs in events:
        for a, b in zip(evs, evs[1:]):
            assert a.t_occ < b.t_occ and a.end <= b.t_occ
        assert all(e.duration > 0 for e in evs)


def test_non_blocking_merges_overlaps():
    g = sg.gen_graph(3, 1, 1)
    gt = GroundTruthIntensity.for_graph(g, 6.0, beta=0.0, blocking=False)
    events = sg.simulate_events(g, gt, 100.0, 4, dur_median_min=30.0)
    for evs in events:
        for a, b in zip(evs, evs[1:]):
            assert a.end < b.t_occ


def test_simulation_is_deterministic():
    g = sg.gen_graph(5, 2, 3)
    gt = GroundTruthIntensity.for_graph(g, 1.0, sg.peak_profile(), beta=0.3)
    a = sg.simulate_events(g, gt, 100.0, 8)
    b = sg.simulate_events(g, gt, 100.0, 8)
    assert a == b
    sa, sb = sg.gen_speeds(g, a, 100.0, 1), sg.gen_speeds(g, b, 100.0, 1)
    assert np.array_equal(sa.speeds, sb.speeds) and np.array_equal(sa.condition, sb.condition)


def test_bound_violation_surfaces_as_thinning_error(monkeypatch):
    def broken(*args, **kwargs):
        raise kernels.BoundViolation("intensity exceeds bound")

    monkeypatch.setattr(kernels, "thin_chunk", broken)
    g = sg.gen_graph(2, 1, 0)
    gt = GroundTruthIntensity.for_graph(g, 1.0)
    with pytest.raises(sg.ThinningError):
        sg.simulate_events(g, gt, 10.0, 0)


def test_peak_durations_are_longer():
    g = sg.gen_graph(10, 2, 0)
    gt = GroundTruthIntensity.for_graph(g, 1.0, sg.peak_profile(), beta=0.0)
    events = [e for evs in sg.simulate_events(g, gt, 2000.0, 1) for e in evs]
    peak = sg.peak_profile() > 1
    in_peak = np.array([peak[e.time_of_day] for e in events])
    d = np.array([e.duration for e in events])
    ratio = np.median(d[in_peak]) / np.median(d[~in_peak])
    assert 1.35 < ratio < 1.65


# --- events and states ----------------------------------------------------------

def test_event_periodic_features():
    e = CongestionEvent(0, 3 * 1440 + 7 * 60 + 12.0, 20.0)
    assert e.time_of_day == (7 * 60 + 10) // 5
    assert e.day_of_week == 3
    assert e.slot_range == range((3 * 1440 + 432) // 5, math.ceil((3 * 1440 + 452) / 5))


def test_labels_match_slot_overlap_oracle():
    g = sg.gen_graph(4, 2, 0)
    gt = GroundTruthIntensity.for_graph(g, 1.0, sg.peak_profile(), beta=0.3)
    events = sg.simulate_events(g, gt, 48.0, 1)
    events[3] = []
    states = sg.gen_speeds(g, events, 48.0, 2)
    assert np.array_equal(states.condition, slot_overlap_labels(events, states.n_slots))
    assert np.all(states.condition[3] == 0)
    cong = states.condition == 1
    assert np.all(states.speeds[cong] < np.broadcast_to(states.free_flow[:, None], cong.shape)[cong])


def test_labels_and_events_round_trip():
    from stgnpp.datasets import events_from_condition
    g = sg.gen_graph(4, 2, 0)
    gt = GroundTruthIntensity.for_graph(g, 1.0, beta=0.3)
    events = sg.simulate_events(g, gt, 72.0, 6)
    cond = sg.condition_from_events(events, 72 * 12)
    segmented = events_from_condition(cond)
    assert np.array_equal(sg.condition_from_events(segmented, 72 * 12), cond)


def test_state_window_slice():
    g = sg.gen_graph(2, 1, 0)
    states = sg.gen_speeds(g, [[], []], 10.0, 0)
    w = states.slice(12, 24)
    assert w.n_slots == 12 and w.start_slot == 12
    assert np.array_equal(w.speeds, states.speeds[:, 12:24])
    with pytest.raises(IndexError):
        states.slice(100, 200)


# --- oracle --------------------------------------------------------------------

def test_oracle_nll_closed_forms():
    g = sg.gen_graph(1, 0, 0)
    gt = GroundTruthIntensity.for_graph(g, 1.0, blocking=False)
    one = [[CongestionEvent(0, 30.0, 1.0)]]
    assert sg.oracle_nll(gt, one, (0.0, 1.0)) == pytest.approx(1.0, abs=1e-12)
    gt3 = GroundTruthIntensity.for_graph(g, 3.0, blocking=False)
    assert sg.oracle_nll(gt3, [[]], (0.0, 2.5)) == pytest.approx(7.5, abs=1e-12)


def test_oracle_nll_matches_quadrature_with_excitation():
    g = sg.gen_graph(4, 2, 2)
    prof = sg.peak_profile(2.0)
    gt = GroundTruthIntensity.for_graph(g, np.array([0.8, 1.2, 1.0, 0.6]), prof, beta=0.7, gamma=2.5)
    events = sg.simulate_events(g, gt, 30.0, 3)
    a, b = 5.0, 25.0
    expected = 0.0
    for n in range(4):
        nbr = sorted(e.t_occ / 60 for m in g.neighbors(n) for e in events[m])
        busy = [(e.t_occ / 60, e.end / 60) for e in events[n]]
        lam = lambda t, n=n, nbr=nbr, busy=busy: brute_intensity(t, gt.mu[n], prof, gt.beta, gt.gamma, nbr, busy)
        breaks = [k / 12 for k in range(int(a * 12), int(b * 12) + 2)] + nbr + [x for iv in busy for x in iv]
        expected += trapezoid_hazard(a, b, lam, breaks)
        for e in events[n]:
            if a < e.t_occ / 60 <= b:
                expected -= math.log(lam(np.array([e.t_occ / 60]))[0])
    assert sg.oracle_nll(gt, events, (a, b)) == pytest.approx(expected, abs=1e-6)


def test_oracle_median_homogeneous():
    g = sg.gen_graph(1, 0, 0)
    for mu in (0.5, 1.0, 2.0, 7.0):
        gt = GroundTruthIntensity.for_graph(g, mu)
        assert sg.oracle_median(gt, [[]], 0, 3.3) == pytest.approx(math.log(2) / mu, abs=1e-9)
    gt = GroundTruthIntensity.for_graph(g, 2.0)
    assert round(sg.oracle_median(gt, [[]], 0, 0.0), 4) == 0.3466


def test_oracle_median_matches_grid_inversion():
    g = sg.gen_graph(3, 2, 1)
    prof = sg.peak_profile(2.0)
    gt = GroundTruthIntensity.for_graph(g, np.array([0.4, 0.9, 0.3]), prof, beta=0.5, gamma=3.0)
    events = sg.simulate_events(g, gt, 6.5, 7)
    t0 = 6.5
    hist = [[e for e in evs if e.t_occ / 60 < t0] for evs in events]
    for n in range(3):
        nbr = sorted(e.t_occ / 60 for m in g.neighbors(n) for e in hist[m])
        busy = [(e.t_occ / 60, e.end / 60) for e in hist[n] if e.end / 60 > t0]
        breaks = [k / 12 for k in range(int(t0 * 12) + 1, int((t0 + 12) * 12))] + [x for iv in busy for x in iv]
        grid = np.unique(np.concatenate([np.arange(t0, t0 + 12.0, 1e-4), [x for x in breaks if x > t0]]))
        # midpoint rule per cell keeps every jump on a cell edge
        lam = brute_intensity(0.5 * (grid[1:] + grid[:-1]), gt.mu[n], prof, gt.beta, gt.gamma, nbr, busy)
        cum = np.concatenate([[0.0], np.cumsum(lam * np.diff(grid))])
        i = np.searchsorted(cum, math.log(2))
        frac = (math.log(2) - cum[i - 1]) / (cum[i] - cum[i - 1])
        expected = grid[i - 1] + frac * (grid[i] - grid[i - 1]) - t0
        assert sg.oracle_median(gt, hist, n, t0) == pytest.approx(expected, abs=1e-6)


def test_oracle_median_ignores_later_events():
    g = sg.gen_graph(2, 1, 0)
    gt = GroundTruthIntensity.for_graph(g, 1.0, beta=2.0, gamma=1.0)
    later = [[], [CongestionEvent(1, 60.0 * 1.2, 5.0)]]
    assert sg.oracle_median(gt, later, 0, 1.0) == pytest.approx(math.log(2), abs=1e-9)
