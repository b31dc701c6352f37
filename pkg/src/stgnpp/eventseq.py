"""Congestion-event embedding and the continuous GRU (GRU-flow between events,
discrete GRU at events)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .params import ParamStore

# inter-event times enter the flow in hours
TAU_SCALE_MINUTES = 60.0


@dataclass(frozen=True)
class FlowConfig:
    flow_layers: int = 2

    def __post_init__(self):
        if self.flow_layers < 1:
            raise ValueError("flow_layers must be >= 1")


@dataclass
class EventSequenceBatch:
    """Per-sequence padded event metadata; one sequence per (window, link).

    ``inter_event[s, i]`` is the gap in hours between the end of the previous
    event on that link and the onset of event ``i``. The optional target
    arrays describe the first event after the history window: its gap from
    the end of the last history event, the part of that gap already elapsed
    at the window end, its duration and whether it exists at all.
    """
    durations: np.ndarray
    inter_event: np.ndarray
    time_of_day: np.ndarray
    day_of_week: np.ndarray
    mask: np.ndarray
    target_mask: np.ndarray = field(default=None)
    target_gap: np.ndarray = field(default=None)
    target_elapsed: np.ndarray = field(default=None)
    target_duration: np.ndarray = field(default=None)

    def __post_init__(self):
        S = self.mask.shape[0]
        for name in ("target_mask", "target_gap", "target_elapsed", "target_duration"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(S))
        self.mask = self.mask.astype(np.float64)
        self.time_of_day = self.time_of_day.astype(np.int64)
        self.day_of_week = self.day_of_week.astype(np.int64)
        real = self.mask > 0
        if np.any(self.inter_event[real] < 0) or np.any(self.inter_event[~real] != 0):
            raise ValueError("inter_event must be >= 0 on real events and 0 on padding")
        if np.any(self.durations[real] <= 0):
            raise ValueError("durations must be positive on real events")

    @property
    def n_seq(self) -> int:
        return self.mask.shape[0]

    @property
    def l_max(self) -> int:
        return self.mask.shape[1]

    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)

    def pad_to(self, l_max: int) -> "EventSequenceBatch":
        extra = l_max - self.l_max
        if extra < 0:
            raise ValueError("cannot shrink a batch")

        def pad(a):
            return np.pad(a, ((0, 0), (0, extra)))

        return EventSequenceBatch(pad(self.durations), pad(self.inter_event), pad(self.time_of_day),
                                  pad(self.day_of_week), pad(self.mask), self.target_mask,
                                  self.target_gap, self.target_elapsed, self.target_duration)

    def transitions(self) -> "Transitions":
        """Scored transitions: consecutive real events, then last event -> target."""
        real = self.mask > 0
        inner = real[:, :-1] & real[:, 1:]
        seq, pos = np.nonzero(inner)
        nxt = pos + 1
        tau = self.inter_event[seq, nxt]
        dur = self.durations[seq, nxt]
        lengths = self.lengths()
        tseq = np.nonzero((self.target_mask > 0) & (lengths > 0))[0]
        tpos = lengths[tseq] - 1
        seq_all = np.concatenate([seq, tseq])
        pos_all = np.concatenate([pos, tpos])
        return Transitions(
            seq=seq_all,
            pos=pos_all,
            tau=np.concatenate([tau, self.target_gap[tseq]]),
            elapsed=np.concatenate([np.zeros(len(seq)), self.target_elapsed[tseq]]),
            duration=np.concatenate([dur, self.target_duration[tseq]]),
            time_of_day=self.time_of_day[seq_all, pos_all],
            day_of_week=self.day_of_week[seq_all, pos_all],
            is_target=np.concatenate([np.zeros(len(seq), bool), np.ones(len(tseq), bool)]),
        )


@dataclass
class Transitions:
    seq: np.ndarray
    pos: np.ndarray
    tau: np.ndarray
    elapsed: np.ndarray
    duration: np.ndarray
    time_of_day: np.ndarray
    day_of_week: np.ndarray
    is_target: np.ndarray

    def __len__(self):
        return len(self.seq)

    def subset(self, keep: np.ndarray) -> "Transitions":
        return Transitions(*(getattr(self, f)[keep] for f in self.__dataclass_fields__))


def event_embed(Hc: Tensor, durations_hours, W_e: Tensor, b_e: Tensor) -> Tensor:
    """``H_e = [H_c, d_e] W_e + b_e`` over ``[S, L, D]``."""
    d = dm.Tensor(np.asarray(durations_hours, dtype=np.float64)[..., None])
    return dm.concat([Hc, d], axis=-1) @ W_e + b_e


class GRUFlowLayer:
    def __init__(self, store: ParamStore, prefix: str, D: int):
        p = store
        self.w_tau = p.normal(f"{prefix}.W_tau", (1, D), 1.0)
        self.wz = p.normal(f"{prefix}.z.w_tau", (1, D), 0.1)
        self.Uz = p.glorot(f"{prefix}.z.U", (D, D))
        self.bz = p.zeros(f"{prefix}.z.b", (D,))
        self.wr = p.normal(f"{prefix}.r.w_tau", (1, D), 0.1)
        self.Ur = p.glorot(f"{prefix}.r.U", (D, D))
        self.br = p.zeros(f"{prefix}.r.b", (D,))
        self.wg = p.normal(f"{prefix}.g.w_tau", (1, D), 0.1)
        self.Ug = p.glorot(f"{prefix}.g.U", (D, D))
        self.bg = p.zeros(f"{prefix}.g.b", (D,))

    def __call__(self, h: Tensor, tau: Tensor) -> Tensor:
        z = dm.sigmoid(tau @ self.wz + h @ self.Uz + self.bz)
        r = dm.sigmoid(tau @ self.wr + h @ self.Ur + self.br)
        g = dm.tanh(tau @ self.wg + (r * h) @ self.Ug + self.bg)
        return h + dm.tanh(tau @ self.w_tau) * (1.0 - z) * (g - h)


def gru_flow_step(h, tau_hours, layers) -> Tensor:
    """Apply the flow layers in sequence at the same elapsed time ``tau`` (hours)."""
    h = dm.as_tensor(h)
    tau = np.asarray(tau_hours, dtype=np.float64)
    if np.any(tau < 0):
        raise ValueError("elapsed time must be non-negative")
    tau_t = dm.Tensor(tau.reshape(-1, 1) if h.ndim > 1 else tau.reshape(1, 1))
    squeeze = h.ndim == 1
    if squeeze:
        h = dm.reshape(h, (1, -1))
    for layer in layers:
        h = layer(h, tau_t)
    return dm.reshape(h, (h.shape[-1],)) if squeeze else h


class GRUCell:
    def __init__(self, store: ParamStore, prefix: str, D_in: int, D: int):
        p = store
        self.Wr, self.Ur, self.br = p.glorot(f"{prefix}.r.W", (D_in, D)), p.glorot(f"{prefix}.r.U", (D, D)), p.zeros(f"{prefix}.r.b", (D,))
        self.Wz, self.Uz, self.bz = p.glorot(f"{prefix}.z.W", (D_in, D)), p.glorot(f"{prefix}.z.U", (D, D)), p.zeros(f"{prefix}.z.b", (D,))
        self.Wh, self.Uh, self.bh = p.glorot(f"{prefix}.h.W", (D_in, D)), p.glorot(f"{prefix}.h.U", (D, D)), p.zeros(f"{prefix}.h.b", (D,))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        r = dm.sigmoid(x @ self.Wr + h @ self.Ur + self.br)
        z = dm.sigmoid(x @ self.Wz + h @ self.Uz + self.bz)
        g = dm.tanh(x @ self.Wh + (r * h) @ self.Uh + self.bh)
        return z * h + (1.0 - z) * g


def discrete_gru_step(x, h, cell: GRUCell) -> Tensor:
    x, h = dm.as_tensor(x), dm.as_tensor(h)
    if x.ndim == 1:
        return dm.reshape(cell(dm.reshape(x, (1, -1)), dm.reshape(h, (1, -1))), (h.shape[-1],))
    return cell(x, h)


class ContinuousGRU:
    def __init__(self, store: ParamStore, D: int, flow: FlowConfig, prefix: str = "seq"):
        self.D = D
        self.W_e = store.glorot(f"{prefix}.embed.W", (D + 1, D))
        self.b_e = store.zeros(f"{prefix}.embed.b", (D,))
        self.flow_layers = [GRUFlowLayer(store, f"{prefix}.flow{l}", D) for l in range(flow.flow_layers)]
        self.cell = GRUCell(store, f"{prefix}.gru", D, D)

    def embed(self, Hc: Tensor, batch: EventSequenceBatch) -> Tensor:
        return event_embed(Hc, batch.durations / TAU_SCALE_MINUTES, self.W_e, self.b_e)

    def unroll(self, batch: EventSequenceBatch, He: Tensor) -> Tensor:
        """Hidden state after each event; ``hidden[:, i]`` scores event ``i + 1``.

        Padded steps carry the previous state forward and emit zeros.
        """
        S, L = batch.n_seq, batch.l_max
        state = dm.Tensor(np.zeros((S, self.D)))
        outputs = []
        for i in range(L):
            m = dm.Tensor(batch.mask[:, i:i + 1])
            x = dm.reshape(dm.gather(He, np.array([i]), axis=1), (S, self.D))
            prev = state if i == 0 else gru_flow_step(state, batch.inter_event[:, i], self.flow_layers)
            new = self.cell(x, prev)
            state = m * new + (1.0 - m) * state
            outputs.append(dm.reshape(m * new, (S, 1, self.D)))
        if not outputs:
            return dm.Tensor(np.zeros((S, 0, self.D)))
        return dm.concat(outputs, axis=1)
