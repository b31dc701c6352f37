"""Median-time and duration prediction, evaluation metrics and the historical-average baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import diffmath as dm
from . import synthgen as sg
from .datasets import Dataset, WindowSample, collate, make_samples
from .eventseq import TAU_SCALE_MINUTES
from .intensity import IntensityHead, gather_hidden, transition_nll

LN2 = math.log(2.0)
MAX_DOUBLINGS = 10
MIN_DURATION_MIN = 1.0


class EmptySplitError(ValueError):
    pass


class DivergentHazardError(ArithmeticError):
    """The cumulative hazard never reaches ln 2 inside the bracket."""


def _conditional_hazard(head: IntensityHead, hU, g, tau, base):
    raw, _ = head._raw(hU, tau)
    return (raw.data[:, 0] - base) * g


def predict_time(head: IntensityHead, h, tod, dow, tau_max: float = 6.0, elapsed=0.0,
                 tol: float = 1e-6, strict: bool = True) -> np.ndarray:
    """Solve ``Lambda(tau) - Lambda(elapsed) = ln 2`` per row by bisection (hours).

    The search starts on ``[elapsed, elapsed + tau_max]`` and doubles the
    upper end up to ten times. Rows whose hazard never reaches ``ln 2``
    raise ``DivergentHazardError`` when ``strict``; otherwise they get the
    last bracket end.
    """
    with dm.no_grad():
        h = dm.as_tensor(h)
        if h.ndim == 1:
            h = dm.reshape(h, (1, -1))
        M = h.shape[0]
        tod = np.broadcast_to(np.asarray(tod, dtype=np.int64), (M,))
        dow = np.broadcast_to(np.asarray(dow, dtype=np.int64), (M,))
        el = np.broadcast_to(np.asarray(elapsed, dtype=np.float64), (M,)).copy()
        if np.any(el < 0):
            raise ValueError("elapsed must be non-negative")
        hU = h @ head.U_h
        g = head.gate(tod, dow).data[:, 0]
        base = head._raw(hU, el)[0].data[:, 0]
        lo = el.copy()
        width = np.full(M, float(tau_max))
        hi = el + width
        short = _conditional_hazard(head, hU, g, hi, base) < LN2
        for _ in range(MAX_DOUBLINGS):
            if not short.any():
                break
            width[short] *= 2.0
            hi = el + width
            short = _conditional_hazard(head, hU, g, hi, base) < LN2
        if short.any() and strict:
            raise DivergentHazardError(f"{int(short.sum())} rows never reach ln 2 within {width.max():g} h")
        active = ~short
        while True:
            gap = hi - lo
            if not np.any(gap[active] > tol):
                break
            mid = 0.5 * (lo + hi)
            below = _conditional_hazard(head, hU, g, mid, base) < LN2
            lo = np.where(active & below, mid, lo)
            hi = np.where(active & ~below, mid, hi)
        return np.where(active, 0.5 * (lo + hi), hi)


def predict_duration(head: IntensityHead, h) -> np.ndarray:
    """Predicted duration in minutes, at least one minute."""
    with dm.no_grad():
        d = head.duration(h).data[:, 0] * TAU_SCALE_MINUTES
    return np.maximum(d, MIN_DURATION_MIN)


@dataclass
class MetricsReport:
    nll: float
    mae_t: float
    mae_d: float
    n_eval: int
    n_excluded: int

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(kv["nll"]), float(kv["mae_t"]), float(kv["mae_d"]),
                   int(kv["n_eval"]), int(kv["n_excluded"]))


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


@dataclass
class Predictions:
    """Per-target predictions; times in minutes after the window end."""
    window_end_min: np.ndarray
    link: np.ndarray
    t_pred: np.ndarray
    d_pred: np.ndarray
    t_true: np.ndarray
    d_true: np.ndarray
    nll: np.ndarray

    def report(self, n_excluded: int) -> MetricsReport:
        if len(self.link) == 0:
            return MetricsReport(math.nan, math.nan, math.nan, 0, n_excluded)
        return MetricsReport(float(self.nll.mean()), float(np.abs(self.t_pred - self.t_true).mean()),
                             float(np.abs(self.d_pred - self.d_true).mean()), len(self.link), n_excluded)


def _concat(parts: list[Predictions]) -> Predictions:
    return Predictions(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(Predictions)))


def predict_samples(model, samples: list[WindowSample], batch_size: int = 16,
                    targets_only: bool = True) -> Predictions:
    """Predict every link with history; with ``targets_only`` keep links that have a scored target."""
    parts = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = collate(chunk)
        ev = batch.events
        with dm.no_grad():
            hidden = model.hidden(batch)
        N = chunk[0].n_links
        lengths = ev.lengths()
        rows = np.nonzero(lengths > 0)[0]
        if targets_only:
            rows = rows[ev.target_mask[rows] > 0]
        if len(rows) == 0:
            continue
        tr = ev.transitions()
        tr = tr.subset(tr.is_target) if targets_only else None
        pos = lengths[rows] - 1
        h = dm.Tensor(hidden.data[rows, pos])
        tod = ev.time_of_day[rows, pos]
        dow = ev.day_of_week[rows, pos]
        wend = np.array([s.end_min for s in chunk])[rows // N]
        last_end = np.concatenate([c.last_end_min for c in chunk])[rows]
        elapsed = (wend - last_end) / TAU_SCALE_MINUTES
        tau = predict_time(model.head, h, tod, dow, elapsed=elapsed, strict=False)
        t_pred = (tau - elapsed) * TAU_SCALE_MINUTES
        d_pred = predict_duration(model.head, h)
        if targets_only:
            with dm.no_grad():
                order = np.argsort(tr.seq, kind="stable")
                assert np.array_equal(tr.seq[order], rows)
                nll = transition_nll(model.head, gather_hidden(hidden, tr), tr).data[order, 0]
            t_true = np.concatenate([c.target_wait_min for c in chunk])[rows]
            d_true = ev.target_duration[rows]
        else:
            nll = t_true = d_true = np.full(len(rows), np.nan)
        parts.append(Predictions(wend, rows % N, t_pred, d_pred, t_true, d_true, nll))
    if not parts:
        e = np.zeros(0)
        return Predictions(e, e.astype(np.int64), e, e, e, e, e)
    return _concat(parts)


def count_excluded(samples: list[WindowSample]) -> int:
    """Links with history whose next event is not scored (busy, too far, or past the split)."""
    return int(sum(((s.history_lengths() > 0) & (s.target_mask == 0)).sum() for s in samples))


def evaluate(model, ds: Dataset, split: str = "test", fractions=(0.6, 0.2, 0.2),
             batch_size: int = 16) -> tuple[MetricsReport, Predictions]:
    samples, _ = make_samples(ds, split, model.cfg.encoder.window_slots, fractions)
    if not samples:
        raise EmptySplitError(f"split {split!r} has no windows with events")
    preds = predict_samples(model, samples, batch_size)
    return preds.report(count_excluded(samples)), preds


# --- historical average -----------------------------------------------------

@dataclass
class HistoricalAverage:
    """Per-link mean gap (end to next onset) and mean duration over training events, minutes."""
    mean_gap: np.ndarray
    mean_duration: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset, fractions=(0.6, 0.2, 0.2)) -> "HistoricalAverage":
        from .datasets import split_ranges
        lo, hi = split_ranges(ds.horizon_min, fractions)["train"]
        gaps, durs = [], []
        all_gaps = [b.t_occ - a.end for evs in ds.events for a, b in zip(evs, evs[1:]) if lo <= b.t_occ < hi]
        all_durs = [e.duration for evs in ds.events for e in evs if lo <= e.t_occ < hi]
        for evs in ds.events:
            tr = [e for e in evs if lo <= e.t_occ and e.end <= hi]
            g = [b.t_occ - a.end for a, b in zip(tr, tr[1:])]
            gaps.append(np.mean(g) if g else np.mean(all_gaps) if all_gaps else 60.0)
            durs.append(np.mean([e.duration for e in tr]) if tr else np.mean(all_durs) if all_durs else 15.0)
        return cls(np.array(gaps), np.array(durs))

    def predict(self, samples: list[WindowSample]) -> Predictions:
        wend, link, t_true, d_true, nll = [], [], [], [], []
        for s in samples:
            for n in np.nonzero(s.target_mask > 0)[0]:
                wait = s.target_wait_min[n]
                m = self.mean_gap[n]
                wend.append(s.end_min)
                link.append(n)
                t_true.append(wait)
                d_true.append(s.target_duration[n])
                # memoryless exponential with the link's mean gap, in hours
                nll.append(wait / m + math.log(m / TAU_SCALE_MINUTES))
        link = np.array(link, dtype=np.int64)
        return Predictions(np.array(wend), link, self.mean_gap[link], self.mean_duration[link],
                           np.array(t_true), np.array(d_true), np.array(nll))


def baseline_ha(ds: Dataset, split: str = "test", fractions=(0.6, 0.2, 0.2),
                window_slots: int = 72) -> tuple[MetricsReport, Predictions]:
    ha = HistoricalAverage.fit(ds, fractions)
    samples, _ = make_samples(ds, split, window_slots, fractions)
    preds = ha.predict(samples)
    return preds.report(count_excluded(samples)), preds


# --- ground-truth oracle on the same targets -------------------------------

def oracle_predictions(ds: Dataset, samples: list[WindowSample], rtol: float = 1e-9) -> Predictions:
    """Ground-truth conditional median and NLL for every scored target.

    The oracle conditions on every event before the window end; for the
    scored links the next onset is after the window end, so this is the
    true conditional law given the past.
    """
    gt = ds.intensity()
    if gt is None:
        raise ValueError("dataset carries no ground-truth intensity")
    oracle = sg.Oracle(gt, ds.events)
    wend, link, t_pred, t_true, nll = [], [], [], [], []
    for s in samples:
        t0 = s.end_min / 60.0
        for n in np.nonzero(s.target_mask > 0)[0]:
            onset = t0 + s.target_wait_min[n] / 60.0
            med = oracle.median(int(n), t0, rtol)
            wend.append(s.end_min)
            link.append(n)
            t_pred.append(med * 60.0)
            t_true.append(s.target_wait_min[n])
            nll.append(oracle.transition_nll(int(n), t0, onset))
    e = np.full(len(link), np.nan)
    return Predictions(np.array(wend), np.array(link, dtype=np.int64), np.array(t_pred), e,
                       np.array(t_true), e.copy(), np.array(nll))


@dataclass
class ScoredTransitions:
    """Every scored transition of a sample set with its absolute span (hours)."""
    link: np.ndarray
    start_h: np.ndarray
    stop_h: np.ndarray
    is_target: np.ndarray
    nll: np.ndarray


def score_transitions(model, samples: list[WindowSample], batch_size: int = 16,
                      conditional: bool = True) -> ScoredTransitions:
    """Model NLL of each inner and target transition, with spans the oracle can re-score.

    With ``conditional`` a target is scored given no onset before the window
    end; otherwise over its whole gap, as in the training loss.
    """
    cols = {k: [] for k in ("link", "start_h", "stop_h", "is_target", "nll")}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = collate(chunk)
        tr = batch.events.transitions()
        if len(tr) == 0:
            continue
        with dm.no_grad():
            nll = transition_nll(model.head, gather_hidden(model.hidden(batch), tr), tr, conditional).data[:, 0]
        N = chunk[0].n_links
        for seq, pos, tgt in zip(tr.seq, tr.pos, tr.is_target):
            s, n = chunk[seq // N], seq % N
            if tgt:
                start = (s.end_min if conditional else s.last_end_min[n]) / 60.0
                stop = (s.end_min + s.target_wait_min[n]) / 60.0
            else:
                start, stop = (s.onsets[n][pos] + s.durations[n][pos]) / 60.0, s.onsets[n][pos + 1] / 60.0
            cols["link"].append(n)
            cols["start_h"].append(start)
            cols["stop_h"].append(stop)
            cols["is_target"].append(tgt)
        cols["nll"].append(nll)
    return ScoredTransitions(np.array(cols["link"], dtype=np.int64), np.array(cols["start_h"]),
                             np.array(cols["stop_h"]), np.array(cols["is_target"], dtype=bool),
                             np.concatenate(cols["nll"]) if cols["nll"] else np.zeros(0))


def oracle_transition_nll(ds: Dataset, scored: ScoredTransitions) -> np.ndarray:
    """Ground-truth NLL of the same transitions under the generating intensity."""
    gt = ds.intensity()
    if gt is None:
        raise ValueError("dataset carries no ground-truth intensity")
    oracle = sg.Oracle(gt, ds.events)
    return np.array([oracle.transition_nll(int(n), a, b)
                     for n, a, b in zip(scored.link, scored.start_h, scored.stop_h)])
