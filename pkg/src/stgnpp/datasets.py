"""Datasets on disk, sliding history windows and model batches.

A window sample covers the six hours before ``end_min``. Its history on a
link is every event that both started and ended inside the window; its
target is the first onset at or after the window end, provided the link is
not congested at the window end and the onset falls within 24 hours and
before the end of the split.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthgen as sg
from .encoder import SpatioTemporalIndex
from .eventseq import TAU_SCALE_MINUTES, EventSequenceBatch

SPEED_SCALE = 100.0
WINDOW_STRIDE_MIN = 60
TARGET_CAP_MIN = 24 * 60
SPLITS = ("train", "val", "test")

GRAPH_HEADER = ["src", "dst", "weight"]
EVENTS_HEADER = ["link", "t_occ_min", "duration_min", "time_of_day", "day_of_week"]
SPEEDS_HEADER = ["link", "slot", "speed", "condition"]


class DataValidationError(ValueError):
    pass


@dataclass
class Dataset:
    graph: sg.RoadGraph
    events: list[list[sg.CongestionEvent]]
    states: sg.TrafficStateWindow
    horizon_hours: float
    provenance: dict = field(default_factory=dict)

    @property
    def n_links(self) -> int:
        return self.graph.n_links

    @property
    def horizon_min(self) -> float:
        return self.horizon_hours * 60.0

    def n_events(self) -> int:
        return sum(len(evs) for evs in self.events)

    def intensity(self) -> sg.GroundTruthIntensity | None:
        """Ground truth recorded in the provenance, when the data is synthetic."""
        p = self.provenance
        if "mu" not in p:
            return None
        return sg.GroundTruthIntensity(
            np.array(_floats(p["mu"])), np.array(_floats(p["profile"])), float(p["beta"]),
            float(p["gamma"]), self.graph.neighbor_lists(), p.get("blocking", "1") in ("1", "True", "true"))


def _floats(s) -> list[float]:
    if isinstance(s, (list, tuple, np.ndarray)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x]


# --- synthetic scenarios ----------------------------------------------------

def night_peak_profile(peak_factor: float = 2.0, night_factor: float = 0.25) -> np.ndarray:
    """Daytime base 1, morning/evening peaks at ``peak_factor``, quiet nights (22h-6h)."""
    prof = sg.peak_profile(peak_factor)
    hours = np.arange(sg.SLOTS_PER_DAY) / sg.SLOTS_PER_HOUR
    prof[(hours < 6.0) | (hours >= 22.0)] = night_factor
    return prof


SCENARIOS = ("benchmark", "homogeneous")


def scenario_intensity(scenario: str, graph: sg.RoadGraph, seed: int) -> sg.GroundTruthIntensity:
    if scenario == "homogeneous":
        return sg.GroundTruthIntensity.for_graph(graph, 2.0, sg.flat_profile(), beta=0.0, gamma=3.0)
    if scenario == "benchmark":
        rng = np.random.default_rng([seed, 1])
        mu = rng.uniform(0.5, 1.5, size=graph.n_links)
        return sg.GroundTruthIntensity.for_graph(graph, mu, night_peak_profile(2.0), beta=0.3, gamma=3.0)
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")


def simulate_dataset(n_links: int, days: float, seed: int, scenario: str = "benchmark",
                     avg_degree: float = 3.0, dur_median_min: float = 15.0,
                     dur_sigma: float = 0.5) -> Dataset:
    if n_links < 1:
        raise sg.ParameterError(f"need at least one link, got {n_links}")
    if days <= 0:
        raise sg.ParameterError(f"days must be positive, got {days}")
    graph = sg.gen_graph(n_links, min(avg_degree, n_links - 1), seed)
    gt = scenario_intensity(scenario, graph, seed)
    horizon = days * 24.0
    events = sg.simulate_events(graph, gt, horizon, seed, dur_median_min=dur_median_min, dur_sigma=dur_sigma)
    states = sg.gen_speeds(graph, events, horizon, seed + 1)
    prov = {
        "seed": seed, "scenario": scenario, "n_links": n_links, "days": days,
        "horizon_hours": horizon, "avg_degree": avg_degree, "dur_median_min": dur_median_min,
        "dur_sigma": dur_sigma, "beta": gt.beta, "gamma": gt.gamma, "blocking": int(gt.blocking),
        "mu": ",".join(repr(float(x)) for x in gt.mu),
        "profile": ",".join(repr(float(x)) for x in gt.profile),
        "free_flow": ",".join(repr(float(x)) for x in states.free_flow),
    }
    return Dataset(graph, events, states, horizon, prov)


# --- CSV persistence --------------------------------------------------------

def _open_w(path: Path):
    try:
        return open(path, "w", newline="", encoding="ascii")
    except OSError as err:
        raise OSError(f"cannot write {path}: {err.strerror}") from err


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create {out}: {err.strerror}") from err
    with _open_w(out / "graph.csv") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(GRAPH_HEADER)
        A = ds.graph.adjacency
        for i, j in zip(*np.nonzero(A)):
            w.writerow([int(i), int(j), repr(float(A[i, j]))])
    with _open_w(out / "events.csv") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for evs in ds.events:
            for e in evs:
                w.writerow([e.link, repr(e.t_occ), repr(e.duration), e.time_of_day, e.day_of_week])
    with _open_w(out / "speeds.csv") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SPEEDS_HEADER)
        st = ds.states
        for n in range(st.n_links):
            for s in range(st.n_slots):
                w.writerow([n, st.start_slot + s, repr(float(st.speeds[n, s])), int(st.condition[n, s])])
    with _open_w(out / "provenance.txt") as f:
        for k, v in ds.provenance.items():
            f.write(f"{k}={v}\n")


def _read_rows(path: Path, header: list[str]) -> list[list[str]]:
    try:
        with open(path, newline="", encoding="ascii") as f:
            rows = list(csv.reader(f))
    except OSError as err:
        raise OSError(f"cannot read {path}: {err.strerror}") from err
    if not rows or rows[0] != header:
        raise DataValidationError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def read_keyvalue(path) -> dict:
    out = {}
    try:
        with open(path, encoding="ascii") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataValidationError(f"{path}: malformed line {line!r}")
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    except OSError as err:
        raise OSError(f"cannot read {path}: {err.strerror}") from err
    return out


def read_events_csv(path, n_links: int | None = None) -> list[list[sg.CongestionEvent]]:
    rows = _read_rows(Path(path), EVENTS_HEADER)
    parsed = []
    for r in rows:
        try:
            parsed.append(sg.CongestionEvent(int(r[0]), float(r[1]), float(r[2])))
        except (ValueError, IndexError) as err:
            raise DataValidationError(f"{path}: bad event row {r}") from err
    if n_links is None:
        n_links = 1 + max((e.link for e in parsed), default=-1)
    events: list[list[sg.CongestionEvent]] = [[] for _ in range(n_links)]
    for e in parsed:
        if not 0 <= e.link < n_links or e.duration <= 0:
            raise DataValidationError(f"{path}: invalid event {e}")
        events[e.link].append(e)
    for evs in events:
        evs.sort(key=lambda e: e.t_occ)
        for a, b in zip(evs, evs[1:]):
            if b.t_occ < a.end:
                raise DataValidationError(f"{path}: overlapping events on link {a.link}")
    return events


def read_speeds_csv(path, n_links: int | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    rows = _read_rows(Path(path), SPEEDS_HEADER)
    if not rows:
        raise DataValidationError(f"{path}: no rows")
    try:
        arr = np.array([[float(x) for x in r] for r in rows])
    except ValueError as err:
        raise DataValidationError(f"{path}: non-numeric value") from err
    links = arr[:, 0].astype(np.int64)
    slots = arr[:, 1].astype(np.int64)
    if n_links is None:
        n_links = int(links.max()) + 1
    first = int(slots.min())
    n_slots = int(slots.max()) - first + 1
    if len(rows) != n_links * n_slots:
        raise DataValidationError(f"{path}: expected {n_links}x{n_slots} rows, got {len(rows)}")
    speeds = np.zeros((n_links, n_slots))
    cond = np.zeros((n_links, n_slots), dtype=np.int8)
    speeds[links, slots - first] = arr[:, 2]
    cond[links, slots - first] = arr[:, 3].astype(np.int8)
    return speeds, cond, first


def read_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    prov = read_keyvalue(d / "provenance.txt") if (d / "provenance.txt").exists() else {}
    grows = _read_rows(d / "graph.csv", GRAPH_HEADER)
    try:
        triples = [(int(a), int(b), float(w)) for a, b, w in grows]
    except ValueError as err:
        raise DataValidationError(f"{d / 'graph.csv'}: bad row") from err
    n_links = int(prov.get("n_links", 1 + max(max(a, b) for a, b, _ in triples)))
    A = np.zeros((n_links, n_links))
    for a, b, w in triples:
        A[a, b] = w
    edges = tuple(sorted((a, b) for a, b, _ in triples if a != b))
    graph = sg.RoadGraph(n_links, edges, A)
    events = read_events_csv(d / "events.csv", n_links)
    speeds, cond, first = read_speeds_csv(d / "speeds.csv", n_links)
    free = np.array(_floats(prov["free_flow"])) if "free_flow" in prov else speeds.max(axis=1)
    states = sg.TrafficStateWindow(speeds, cond, free, first)
    horizon = float(prov.get("horizon_hours", (first + speeds.shape[1]) / sg.SLOTS_PER_HOUR))
    return Dataset(graph, events, states, horizon, prov)


# --- windows ----------------------------------------------------------------

@dataclass
class WindowSample:
    end_min: float
    features: np.ndarray                    # [N, T, 2]
    indexes: list[list[SpatioTemporalIndex]]
    onsets: list[np.ndarray]                # absolute minutes, per link
    durations: list[np.ndarray]             # minutes, per link
    inter_event: list[np.ndarray]           # hours, per link
    time_of_day: list[np.ndarray]
    day_of_week: list[np.ndarray]
    target_mask: np.ndarray                 # [N]
    target_gap: np.ndarray                  # hours from end of last history event
    target_elapsed: np.ndarray              # hours from end of last history event to window end
    target_duration: np.ndarray             # minutes
    target_wait_min: np.ndarray             # minutes from window end to the target onset
    last_end_min: np.ndarray                # end of the last history event, nan without history

    @property
    def n_links(self) -> int:
        return self.features.shape[0]

    def history_lengths(self) -> np.ndarray:
        return np.array([len(d) for d in self.durations])


def split_ranges(horizon_min: float, fractions=(0.6, 0.2, 0.2)) -> dict[str, tuple[float, float]]:
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f <= 0 for f in fractions):
        raise ValueError(f"split fractions must be positive and sum to 1, got {fractions}")
    edges = np.concatenate([[0.0], np.cumsum(fractions)]) * horizon_min
    return {name: (float(edges[i]), float(edges[i + 1])) for i, name in enumerate(SPLITS)}


class _LinkArrays:
    def __init__(self, events: list[list[sg.CongestionEvent]]):
        self.onsets = [np.array([e.t_occ for e in evs]) for evs in events]
        self.ends = [np.array([e.end for e in evs]) for evs in events]
        self.events = events


def elapsed_slots(e: sg.CongestionEvent) -> range:
    """Slots of ``e`` already complete when it ends.

    The slot holding the end also covers time after it, where the next
    event on the link may already have begun; pooling it would let the
    model see that onset. An event inside a single slot keeps that slot.
    """
    first = e.slot_range.start
    stop = int(math.floor(e.end / sg.SLOT_MINUTES))
    return range(first, max(stop, first + 1))


def build_sample(ds: Dataset, end_slot: int, window_slots: int, target_limit_min: float | None = None,
                 arrays: _LinkArrays | None = None) -> WindowSample:
    st = ds.states
    start_slot = end_slot - window_slots
    start_min = start_slot * sg.SLOT_MINUTES
    end_min = end_slot * sg.SLOT_MINUTES
    window = st.slice(start_slot, end_slot)
    feats = np.stack([window.speeds / SPEED_SCALE, window.condition.astype(np.float64)], axis=-1)
    arrays = arrays or _LinkArrays(ds.events)
    limit = end_min + TARGET_CAP_MIN
    if target_limit_min is not None:
        limit = min(limit, target_limit_min)
    N = ds.n_links
    out = dict(indexes=[], onsets=[], durations=[], inter_event=[], time_of_day=[], day_of_week=[])
    t_mask, t_gap, t_el, t_dur, t_wait = (np.zeros(N) for _ in range(5))
    last_end = np.full(N, np.nan)
    for n in range(N):
        on, en, evs = arrays.onsets[n], arrays.ends[n], arrays.events[n]
        lo = int(np.searchsorted(on, start_min, side="left"))
        hi = int(np.searchsorted(en, end_min, side="right"))
        hist = range(lo, max(lo, hi))
        idx, ons, dur, gap, tod, dow = [], [], [], [], [], []
        for i in hist:
            e = evs[i]
            slots = tuple(s - start_slot for s in elapsed_slots(e))
            idx.append(SpatioTemporalIndex(n, slots))
            ons.append(e.t_occ)
            dur.append(e.duration)
            gap.append((e.t_occ - evs[i - 1].end) / TAU_SCALE_MINUTES if i > 0 else 0.0)
            tod.append(e.time_of_day)
            dow.append(e.day_of_week)
        out["indexes"].append(idx)
        out["onsets"].append(np.array(ons))
        out["durations"].append(np.array(dur))
        out["inter_event"].append(np.array(gap))
        out["time_of_day"].append(np.array(tod, dtype=np.int64))
        out["day_of_week"].append(np.array(dow, dtype=np.int64))
        nxt = max(lo, hi)
        if idx:
            last_end[n] = evs[nxt - 1].end
        if idx and nxt < len(evs) and on[nxt] >= end_min and on[nxt] < limit:
            t_mask[n] = 1.0
            t_gap[n] = (on[nxt] - last_end[n]) / TAU_SCALE_MINUTES
            t_el[n] = (end_min - last_end[n]) / TAU_SCALE_MINUTES
            t_dur[n] = evs[nxt].duration
            t_wait[n] = on[nxt] - end_min
    return WindowSample(end_min, feats, target_mask=t_mask, target_gap=t_gap, target_elapsed=t_el,
                        target_duration=t_dur, target_wait_min=t_wait, last_end_min=last_end, **out)


def make_samples(ds: Dataset, split: str, window_slots: int = 72, fractions=(0.6, 0.2, 0.2),
                 stride_min: int = WINDOW_STRIDE_MIN) -> tuple[list[WindowSample], int]:
    """Sliding windows whose span lies inside ``split``; returns ``(samples, skipped)``.

    Windows without any history event on any link are skipped and counted.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    lo, hi = split_ranges(ds.horizon_min, fractions)[split]
    window_min = window_slots * sg.SLOT_MINUTES
    first_end = math.ceil((lo + window_min) / stride_min) * stride_min
    arrays = _LinkArrays(ds.events)
    samples, skipped = [], 0
    end = first_end
    while end <= hi and end / sg.SLOT_MINUTES <= ds.states.start_slot + ds.states.n_slots:
        s = build_sample(ds, int(end // sg.SLOT_MINUTES), window_slots, hi, arrays)
        if s.history_lengths().sum() == 0:
            skipped += 1
        else:
            samples.append(s)
        end += stride_min
    return samples, skipped


@dataclass
class ModelBatch:
    features: np.ndarray      # [B, N, T, F]
    selection: np.ndarray     # [B, N, L, T]
    events: EventSequenceBatch
    samples: list[WindowSample]

    @property
    def n_windows(self) -> int:
        return self.features.shape[0]


def collate(samples: list[WindowSample], l_max: int | None = None) -> ModelBatch:
    B = len(samples)
    N, T, F = samples[0].features.shape
    if l_max is None:
        l_max = max(int(s.history_lengths().max()) for s in samples)
    sel = np.zeros((B, N, l_max, T))
    fields = {k: np.zeros((B, N, l_max)) for k in ("durations", "inter_event", "time_of_day", "day_of_week", "mask")}
    for b, s in enumerate(samples):
        for n in range(N):
            for i, idx in enumerate(s.indexes[n]):
                sel[b, n, i, list(idx.slots)] = 1.0
            k = len(s.indexes[n])
            fields["durations"][b, n, :k] = s.durations[n]
            fields["inter_event"][b, n, :k] = s.inter_event[n]
            fields["time_of_day"][b, n, :k] = s.time_of_day[n]
            fields["day_of_week"][b, n, :k] = s.day_of_week[n]
            fields["mask"][b, n, :k] = 1.0
    S = B * N
    ev = EventSequenceBatch(
        **{k: v.reshape(S, l_max) for k, v in fields.items()},
        target_mask=np.concatenate([s.target_mask for s in samples]),
        target_gap=np.concatenate([s.target_gap for s in samples]),
        target_elapsed=np.concatenate([s.target_elapsed for s in samples]),
        target_duration=np.concatenate([s.target_duration for s in samples]),
    )
    feats = np.stack([s.features for s in samples])
    return ModelBatch(feats, sel, ev, samples)


def window_file_sample(speeds_csv, window_slots: int, start_min: float = 0.0,
                       events_csv=None, n_links: int | None = None) -> WindowSample:
    """History window read from a speeds-format CSV (slots relative to the window).

    Events come from ``events_csv`` (absolute minutes) when given; otherwise
    they are segmented from the condition labels as maximal congested runs.
    """
    speeds, cond, first = read_speeds_csv(speeds_csv, n_links)
    if speeds.shape[1] != window_slots:
        raise DataValidationError(f"window has {speeds.shape[1]} slots, model expects {window_slots}")
    if start_min % sg.SLOT_MINUTES:
        raise DataValidationError("window start must lie on the 5-minute grid")
    N = speeds.shape[0]
    start_slot = int(start_min // sg.SLOT_MINUTES)
    if events_csv is not None:
        events = read_events_csv(events_csv, N)
    else:
        events = events_from_condition(cond, start_slot)
    states = sg.TrafficStateWindow(speeds, cond, speeds.max(axis=1), start_slot)
    ds = Dataset(sg.RoadGraph(N, (), np.eye(N)), events, states, (start_slot + window_slots) / sg.SLOTS_PER_HOUR)
    return build_sample(ds, start_slot + window_slots, window_slots)


def events_from_condition(cond: np.ndarray, start_slot: int = 0) -> list[list[sg.CongestionEvent]]:
    events = []
    for n, row in enumerate(cond):
        evs = []
        padded = np.concatenate([[0], row.astype(np.int8), [0]])
        starts = np.nonzero(np.diff(padded) == 1)[0]
        stops = np.nonzero(np.diff(padded) == -1)[0]
        for a, b in zip(starts, stops):
            evs.append(sg.CongestionEvent(n, float((start_slot + a) * sg.SLOT_MINUTES),
                                          float((b - a) * sg.SLOT_MINUTES)))
        events.append(evs)
    return events


def write_window(ds: Dataset, end_slot: int, window_slots: int, path) -> None:
    """Export the speeds/labels of one history window (relative slots) for ``predict``."""
    st = ds.states.slice(end_slot - window_slots, end_slot)
    with _open_w(Path(path)) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SPEEDS_HEADER)
        for n in range(st.n_links):
            for s in range(st.n_slots):
                w.writerow([n, s, repr(float(st.speeds[n, s])), int(st.condition[n, s])])


def thread_cap() -> int | None:
    v = os.environ.get("STGNPP_THREADS")
    return int(v) if v else None
