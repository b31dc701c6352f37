"""Synthetic road networks, congestion events and traffic states with a known intensity.

Times inside the generator and the oracle are in hours; ``CongestionEvent``
stores minutes from the dataset epoch. The intensity of link ``n`` is

    lambda_n(t) = mu_n * profile(t mod 24h) * (1 + beta * sum_{m ~ n} sum_{t_m,i < t} exp(-gamma (t - t_m,i)))

multiplied by zero while the link is already congested (``blocking``), so
that events of one link never overlap and the oracle likelihood is exact
for the observed sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

SLOT_MINUTES = 5
SLOTS_PER_HOUR = 12
SLOTS_PER_DAY = 288
_CHUNK_ROWS = 4096
_EVENT_BUFFER = 1024


class ParameterError(ValueError):
    """Invalid generator parameters."""


class ThinningError(RuntimeError):
    """The thinning sampler found an intensity above its own bound."""


@dataclass(frozen=True)
class RoadGraph:
    n_links: int
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray

    def neighbors(self, n: int) -> list[int]:
        return sorted({j for i, j in self.edges if i == n and j != n})

    def neighbor_lists(self) -> list[list[int]]:
        return [self.neighbors(n) for n in range(self.n_links)]


def _row_normalize(a: np.ndarray) -> np.ndarray:
    sums = a.sum(axis=1, keepdims=True)
    return np.divide(a, sums, out=np.zeros_like(a), where=sums > 0)


def gen_graph(n_links: int, avg_degree: float, seed: int) -> RoadGraph:
    """Connected random graph: a chain backbone plus random extra undirected edges."""
    if n_links < 1:
        raise ParameterError(f"n_links must be >= 1, got {n_links}")
    if avg_degree >= n_links or avg_degree < 0:
        raise ParameterError(f"avg_degree must lie in [0, n_links), got {avg_degree} for {n_links} links")
    rng = np.random.default_rng(seed)
    undirected = {(i, i + 1) for i in range(n_links - 1)}
    target = int(round(n_links * avg_degree / 2))
    max_edges = n_links * (n_links - 1) // 2
    target = min(target, max_edges)
    while len(undirected) < target:
        i, j = rng.integers(0, n_links, size=2)
        if i == j:
            continue
        undirected.add((int(min(i, j)), int(max(i, j))))
    edges = sorted(undirected | {(j, i) for i, j in undirected})
    a = np.eye(n_links)
    for i, j in edges:
        a[i, j] = 1.0
    return RoadGraph(n_links, tuple(edges), _row_normalize(a))


def flat_profile() -> np.ndarray:
    return np.ones(SLOTS_PER_DAY)


def peak_profile(peak_factor: float = 2.0,
                 peaks: Sequence[tuple[float, float]] = ((7.0, 10.0), (17.0, 20.0))) -> np.ndarray:
    """Daily multiplicative curve: ``peak_factor`` inside the peak hours, 1 elsewhere."""
    hours = np.arange(SLOTS_PER_DAY) / SLOTS_PER_HOUR
    prof = np.ones(SLOTS_PER_DAY)
    for lo, hi in peaks:
        prof[(hours >= lo) & (hours < hi)] = peak_factor
    return prof


@dataclass
class GroundTruthIntensity:
    mu: np.ndarray
    profile: np.ndarray
    beta: float
    gamma: float
    neighbors: list[list[int]]
    blocking: bool = True

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.profile = np.asarray(self.profile, dtype=np.float64)
        if self.profile.shape != (SLOTS_PER_DAY,):
            raise ParameterError(f"profile must have {SLOTS_PER_DAY} slots, got {self.profile.shape}")
        if np.any(self.mu <= 0) or np.any(self.profile <= 0):
            raise ParameterError("base rates and profile values must be positive")
        if self.beta < 0 or self.gamma <= 0:
            raise ParameterError(f"need beta >= 0 and gamma > 0, got {self.beta}, {self.gamma}")
        if len(self.neighbors) != len(self.mu):
            raise ParameterError("one neighbor list per link required")

    @classmethod
    def for_graph(cls, graph: RoadGraph, mu, profile=None, beta: float = 0.0,
                  gamma: float = 3.0, blocking: bool = True) -> "GroundTruthIntensity":
        mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (graph.n_links,)).copy()
        if profile is None:
            profile = flat_profile()
        return cls(mu, profile, beta, gamma, graph.neighbor_lists(), blocking)

    @property
    def n_links(self) -> int:
        return len(self.mu)

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        ptr = np.zeros(self.n_links + 1, dtype=np.int64)
        ptr[1:] = np.cumsum([len(nb) for nb in self.neighbors])
        idx = np.array([m for nb in self.neighbors for m in nb], dtype=np.int64)
        return ptr, idx

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(), "profile": self.profile.tolist(), "beta": self.beta,
            "gamma": self.gamma, "blocking": self.blocking,
        }


@dataclass(frozen=True)
class CongestionEvent:
    link: int
    t_occ: float
    duration: float

    @property
    def end(self) -> float:
        return self.t_occ + self.duration

    @property
    def slot_range(self) -> range:
        first = int(math.floor(self.t_occ / SLOT_MINUTES))
        last = int(math.ceil(self.end / SLOT_MINUTES)) - 1
        return range(first, max(first, last) + 1)

    @property
    def time_of_day(self) -> int:
        return int(self.t_occ // SLOT_MINUTES) % SLOTS_PER_DAY

    @property
    def day_of_week(self) -> int:
        return int(self.t_occ // (SLOT_MINUTES * SLOTS_PER_DAY)) % 7


@dataclass
class TrafficStateWindow:
    speeds: np.ndarray
    condition: np.ndarray
    free_flow: np.ndarray
    start_slot: int = 0
    slot_minutes: int = field(default=SLOT_MINUTES)

    @property
    def n_links(self) -> int:
        return self.speeds.shape[0]

    @property
    def n_slots(self) -> int:
        return self.speeds.shape[1]

    def slice(self, start: int, stop: int) -> "TrafficStateWindow":
        """Sub-window over absolute slots ``[start, stop)``."""
        a, b = start - self.start_slot, stop - self.start_slot
        if a < 0 or b > self.n_slots or a >= b:
            raise IndexError(f"slots [{start}, {stop}) outside [{self.start_slot}, {self.start_slot + self.n_slots})")
        return TrafficStateWindow(self.speeds[:, a:b], self.condition[:, a:b], self.free_flow, start)


def _merge_overlapping(events: list[CongestionEvent]) -> list[CongestionEvent]:
    merged: list[CongestionEvent] = []
    for ev in events:
        if merged and ev.t_occ < merged[-1].end:
            last = merged[-1]
            merged[-1] = CongestionEvent(last.link, last.t_occ, max(last.end, ev.end) - last.t_occ)
        else:
            merged.append(ev)
    return merged


def simulate_events(graph: RoadGraph, gt: GroundTruthIntensity, horizon_hours: float, seed: int,
                    dur_median_min: float = 15.0, dur_sigma: float = 0.5,
                    peak_duration_mult: float = 1.5) -> list[list[CongestionEvent]]:
    """Draw congestion events for every link by Ogata thinning.

    The joint bound over links is recomputed after every proposal, at every
    5-minute profile breakpoint and whenever a congested link frees up.
    Durations are log-normal (median ``dur_median_min``), stretched by
    ``peak_duration_mult`` when the onset falls in a slot where the profile
    exceeds 1.
    """
    if horizon_hours <= 0:
        raise ParameterError(f"horizon must be positive, got {horizon_hours}")
    if gt.n_links != graph.n_links:
        raise ParameterError(f"intensity has {gt.n_links} links, graph has {graph.n_links}")
    rng = np.random.default_rng(seed)
    ptr, idx = gt.csr()
    peak = (gt.profile > 1.0).astype(np.uint8)
    exc = np.zeros(gt.n_links)
    busy = np.zeros(gt.n_links)
    out_link = np.zeros(_EVENT_BUFFER, dtype=np.int64)
    out_t = np.zeros(_EVENT_BUFFER)
    out_d = np.zeros(_EVENT_BUFFER)
    links: list[int] = []
    times: list[float] = []
    durs: list[float] = []
    t, k = 0.0, 0
    U = rng.random((_CHUNK_ROWS, 5))
    pos = 0
    done = False
    while not done:
        if pos >= len(U):
            U = rng.random((_CHUNK_ROWS, 5))
            pos = 0
        try:
            t, k, used, n_out, done = kernels.thin_chunk(
                U[pos:], t, k, float(horizon_hours), gt.mu, gt.profile, float(gt.beta),
                float(gt.gamma), exc, busy, ptr, idx, gt.blocking, math.log(dur_median_min),
                float(dur_sigma), float(peak_duration_mult), peak, out_link, out_t, out_d)
        except kernels.BoundViolation as err:
            raise ThinningError(str(err)) from err
        pos += used
        links.extend(out_link[:n_out].tolist())
        times.extend(out_t[:n_out].tolist())
        durs.extend(out_d[:n_out].tolist())
    per_link: list[list[CongestionEvent]] = [[] for _ in range(gt.n_links)]
    for n, th, dh in zip(links, times, durs):
        per_link[n].append(CongestionEvent(n, th * 60.0, dh * 60.0))
    if not gt.blocking:
        per_link = [_merge_overlapping(evs) for evs in per_link]
    return per_link


def condition_from_events(events: list[list[CongestionEvent]], n_slots: int) -> np.ndarray:
    cond = np.zeros((len(events), n_slots), dtype=np.int8)
    for n, evs in enumerate(events):
        for ev in evs:
            r = ev.slot_range
            cond[n, max(r.start, 0):min(r.stop, n_slots)] = 1
    return cond


def gen_speeds(graph: RoadGraph, events: list[list[CongestionEvent]], horizon_hours: float,
               seed: int) -> TrafficStateWindow:
    """Speeds (km/h) and congestion labels on the 5-minute grid over the horizon.

    Free flow carries a mild daily dip and noise; inside an event the speed
    drops by 40-70% at onset and recovers linearly over the last 30% of the
    event, staying at least 10% below free flow.
    """
    rng = np.random.default_rng(seed)
    n = graph.n_links
    n_slots = int(math.ceil(horizon_hours * SLOTS_PER_HOUR))
    free_flow = rng.uniform(50.0, 90.0, size=n)
    hours = (np.arange(n_slots) + 0.5) / SLOTS_PER_HOUR
    daily = 1.0 - 0.08 * (1.0 - np.cos(2.0 * np.pi * (hours % 24.0 - 4.0) / 24.0)) / 2.0
    speeds = free_flow[:, None] * daily[None, :] * (1.0 + 0.02 * rng.standard_normal((n, n_slots)))
    for link, evs in enumerate(events):
        for ev in evs:
            drop = rng.uniform(0.4, 0.7)
            slots = np.array([s for s in ev.slot_range if 0 <= s < n_slots], dtype=np.int64)
            if slots.size == 0:
                continue
            mid = np.clip((slots + 0.5) * SLOT_MINUTES, ev.t_occ, ev.end)
            progress = (mid - ev.t_occ) / ev.duration
            recovery = np.clip((progress - 0.7) / 0.3, 0.0, 1.0)
            factor = 1.0 - drop * (1.0 - 0.75 * recovery)
            noise = np.clip(0.01 * rng.standard_normal(slots.size), -0.02, 0.02)
            speeds[link, slots] = free_flow[link] * factor * (1.0 + noise)
    cond = condition_from_events(events, n_slots)
    return TrafficStateWindow(speeds, cond, free_flow, 0)


class _LinkHistory:
    """Sorted per-link arrays (hours) the oracle kernels consume."""

    def __init__(self, gt: GroundTruthIntensity, events: list[list[CongestionEvent]]):
        self.gt = gt
        self.onsets = [np.array([e.t_occ / 60.0 for e in evs]) for evs in events]
        self.ends = [np.array([e.end / 60.0 for e in evs]) for evs in events]
        self.nbr = []
        for n in range(gt.n_links):
            parts = [self.onsets[m] for m in gt.neighbors[n]]
            self.nbr.append(np.sort(np.concatenate(parts)) if parts else np.zeros(0))
        self._empty = np.zeros(0)

    def _args(self, n: int):
        gt = self.gt
        bs, be = (self.onsets[n], self.ends[n]) if gt.blocking else (self._empty, self._empty)
        return float(gt.mu[n]), gt.profile, float(gt.beta), float(gt.gamma), self.nbr[n], bs, be

    def hazard(self, n: int, a: float, b: float) -> float:
        mu, prof, beta, gamma, nbr, bs, be = self._args(n)
        return kernels.hazard_integral(a, b, mu, prof, beta, gamma, nbr, bs, be)

    def intensity(self, n: int, t: float) -> float:
        mu, prof, beta, gamma, nbr, bs, be = self._args(n)
        return kernels.intensity_at(t, mu, prof, beta, gamma, nbr, bs, be)

    def median(self, n: int, t: float, rtol: float) -> float:
        mu, prof, beta, gamma, nbr, bs, be = self._args(n)
        # only what is known at t: later onsets anywhere are not yet drawn
        nbr = nbr[:np.searchsorted(nbr, t, side="left")]
        k = np.searchsorted(bs, t, side="left")
        return kernels.hazard_median(t, mu, prof, beta, gamma, nbr, bs[:k], be[:k], rtol)


class Oracle:
    """Exact likelihood and median queries under the generating intensity.

    Build once per event set; queries reuse the sorted per-link histories.
    """

    def __init__(self, gt: GroundTruthIntensity, events: list[list[CongestionEvent]]):
        self.events = events
        self._hist = _LinkHistory(gt, events)

    def cumulative_hazard(self, link: int, a: float, b: float) -> float:
        return self._hist.hazard(link, a, b)

    def intensity(self, link: int, t: float) -> float:
        return self._hist.intensity(link, t)

    def transition_nll(self, link: int, start: float, stop: float) -> float:
        """NLL of the next onset at ``stop`` given none in ``(start, stop)``."""
        lam = self.intensity(link, stop)
        return self.cumulative_hazard(link, start, stop) - math.log(lam)

    def nll(self, window: tuple[float, float]) -> float:
        a, b = window
        total = 0.0
        for n in range(len(self.events)):
            onsets = self._hist.onsets[n]
            for t in onsets[(onsets > a) & (onsets <= b)]:
                total -= math.log(self.intensity(n, float(t)))
            total += self.cumulative_hazard(n, a, b)
        return total

    def median(self, link: int, t: float, rtol: float = 1e-9) -> float:
        """Median waiting time (hours) from ``t`` given the onsets before ``t``."""
        return self._hist.median(link, t, rtol)


def oracle_nll(gt: GroundTruthIntensity, events: list[list[CongestionEvent]],
               window: tuple[float, float]) -> float:
    """Exact negative log-likelihood of all onsets in ``(a, b]`` (hours) under ``gt``."""
    return Oracle(gt, events).nll(window)


def oracle_median(gt: GroundTruthIntensity, history: list[list[CongestionEvent]], link: int,
                  t: float, rtol: float = 1e-9) -> float:
    """True median waiting time (hours) of the next onset on ``link`` after ``t``."""
    return Oracle(gt, history).median(link, t, rtol)
