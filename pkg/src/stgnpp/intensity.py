"""Periodic-gated cumulative hazard, its exact derivative, and the training losses.

The hazard net maps ``[h, tau]`` to a scalar ``raw(tau)`` through tanh hidden
layers and a softplus output. Every weight on a path from ``tau`` is the
softplus of a free parameter, so ``raw`` is nondecreasing in ``tau``;
``Lambda(tau) = (raw(tau) - raw(0)) * gate`` anchors the hazard at zero.
The density ``lambda = dLambda/dtau`` is propagated forward through the same
layers rather than differentiated numerically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .eventseq import TAU_SCALE_MINUTES, EventSequenceBatch, Transitions
from .params import ParamStore

LOG_FLOOR = 1e-10
N_TIME_OF_DAY = 288
N_DAY_OF_WEEK = 7


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 32
    hidden_layers: int = 2
    periodic_dim: int = 8


class IntensityHead:
    def __init__(self, store: ParamStore, D: int, cfg: HeadConfig = HeadConfig(), prefix: str = "head"):
        p = store
        K = cfg.hidden
        self.cfg = cfg
        self.U_h = p.glorot(f"{prefix}.mono.U_h", (D, K))
        self.w_tau = p.normal(f"{prefix}.mono.w_tau_raw", (1, K), 0.5)
        self.b = [p.normal(f"{prefix}.mono.b0", (K,), 1.0)]
        self.W_raw = []
        for l in range(1, cfg.hidden_layers):
            # softplus(-2) ~ 0.13 keeps early hidden-to-hidden slopes small
            self.W_raw.append(p.add(f"{prefix}.mono.W{l}_raw", p.rng.normal(-2.0, 0.5, size=(K, K))))
            self.b.append(p.zeros(f"{prefix}.mono.b{l}", (K,)))
        self.v_raw = p.add(f"{prefix}.mono.v_raw", p.rng.normal(-2.0, 0.5, size=(K, 1)))
        self.s_raw = p.add(f"{prefix}.mono.skip_raw", np.zeros((1, 1)))
        self.c = p.zeros(f"{prefix}.mono.c", (1,))
        self.emb_tod = p.normal(f"{prefix}.gate.tod", (N_TIME_OF_DAY, cfg.periodic_dim), 0.1)
        self.emb_dow = p.normal(f"{prefix}.gate.dow", (N_DAY_OF_WEEK, cfg.periodic_dim), 0.1)
        self.W_p = p.glorot(f"{prefix}.gate.W", (2 * cfg.periodic_dim, D))
        self.b_p = p.zeros(f"{prefix}.gate.b", (D,))
        self.W_d = p.glorot(f"{prefix}.duration.W", (D, 1))
        self.b_d = p.add(f"{prefix}.duration.b", np.full((1,), 0.25))

    # -- building blocks over row batches [M, D] --------------------------------

    def gate(self, tod, dow) -> Tensor:
        """Scalar periodic gate in (0, 1) per row, shape ``[M, 1]``."""
        feats = dm.concat([dm.gather(self.emb_tod, np.asarray(tod), axis=0),
                           dm.gather(self.emb_dow, np.asarray(dow), axis=0)], axis=-1)
        return dm.mean(dm.sigmoid(feats @ self.W_p + self.b_p), axis=-1, keepdims=True)

    def _raw(self, hU: Tensor, tau) -> tuple[Tensor, Tensor]:
        """``raw(tau)`` and ``d raw / d tau`` for rows sharing the pre-computed ``h U_h``."""
        tau = dm.Tensor(np.asarray(tau, dtype=np.float64).reshape(-1, 1))
        w = dm.softplus(self.w_tau)
        a = dm.tanh(hU + tau @ w + self.b[0])
        da = (1.0 - a * a) * w
        for W_raw, b in zip(self.W_raw, self.b[1:]):
            W = dm.softplus(W_raw)
            a = dm.tanh(a @ W + b)
            da = (1.0 - a * a) * (da @ W)
        v = dm.softplus(self.v_raw)
        s = dm.softplus(self.s_raw)
        o = a @ v + tau @ s + self.c
        do = da @ v + s
        return dm.softplus(o), dm.sigmoid(o) * do

    def hazard_terms(self, h: Tensor, tau, tod, dow, elapsed=None) -> tuple[Tensor, Tensor, Tensor]:
        """``(Lambda(tau) - Lambda(elapsed), lambda(tau), Lambda(tau))``, each ``[M, 1]``."""
        h = dm.as_tensor(h)
        hU = h @ self.U_h
        g = self.gate(tod, dow)
        raw_t, draw_t = self._raw(hU, tau)
        raw_0, _ = self._raw(hU, np.zeros(h.shape[0]))
        cum = (raw_t - raw_0) * g
        if elapsed is None:
            cond = cum
        else:
            raw_e, _ = self._raw(hU, elapsed)
            cond = (raw_t - raw_e) * g
        return cond, draw_t * g, cum

    def cumulative_intensity(self, h, tau, tod, dow) -> Tensor:
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(tau < 0):
            raise ValueError("tau must be non-negative")
        h, tau, tod, dow = _rows(h, tau, tod, dow)
        return self.hazard_terms(h, tau, tod, dow)[2]

    def intensity_density(self, h, tau, tod, dow) -> Tensor:
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(tau < 0):
            raise ValueError("tau must be non-negative")
        h, tau, tod, dow = _rows(h, tau, tod, dow)
        return self.hazard_terms(h, tau, tod, dow)[1]

    def duration(self, h) -> Tensor:
        """Predicted duration in hours, ``[M, 1]``."""
        return dm.as_tensor(h) @ self.W_d + self.b_d


def _rows(h, tau, tod, dow):
    h = dm.as_tensor(h)
    if h.ndim == 1:
        h = dm.reshape(h, (1, -1))
    M = h.shape[0]
    return (h, np.broadcast_to(tau, (M,)), np.broadcast_to(np.asarray(tod, dtype=np.int64), (M,)),
            np.broadcast_to(np.asarray(dow, dtype=np.int64), (M,)))


def gather_hidden(hidden: Tensor, tr: Transitions) -> Tensor:
    S, L, D = hidden.shape
    flat = dm.reshape(hidden, (S * L, D))
    return dm.gather(flat, tr.seq * L + tr.pos, axis=0)


def transition_nll(head: IntensityHead, h_rows: Tensor, tr: Transitions, conditional: bool = True) -> Tensor:
    """Per-transition ``Lambda(tau) - Lambda(elapsed) - log lambda(tau)``, shape ``[M, 1]``.

    With ``conditional=False`` the elapsed part is scored too, i.e. the whole gap.
    """
    elapsed = tr.elapsed if conditional else None
    cond, dens, _ = head.hazard_terms(h_rows, tr.tau, tr.time_of_day, tr.day_of_week, elapsed)
    return cond - dm.log(dm.clamp_min(dens, LOG_FLOOR))


def _checked_transitions(batch: EventSequenceBatch, tr: Transitions | None) -> Transitions:
    tr = batch.transitions() if tr is None else tr
    if len(tr) == 0:
        raise EmptyBatchError("batch has no real transitions")
    return tr


def nll(head: IntensityHead, hidden: Tensor, batch: EventSequenceBatch,
        tr: Transitions | None = None) -> Tensor:
    tr = _checked_transitions(batch, tr)
    return dm.mean(transition_nll(head, gather_hidden(hidden, tr), tr, conditional=False))


def duration_loss(head: IntensityHead, hidden: Tensor, batch: EventSequenceBatch,
                  tr: Transitions | None = None) -> Tensor:
    """Mean absolute duration error in hours over the scored transitions."""
    tr = _checked_transitions(batch, tr)
    pred = head.duration(gather_hidden(hidden, tr))
    target = dm.Tensor((tr.duration / TAU_SCALE_MINUTES).reshape(-1, 1))
    return dm.mean(dm.abs(pred - target))


def total_loss(head: IntensityHead, hidden: Tensor, batch: EventSequenceBatch, cfg: LossConfig,
               tr: Transitions | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """``(nll + alpha * duration_loss, nll, duration_loss)``.

    Targets are scored over their whole gap: the quiet stretch up to the
    window end is observed, so its survival term belongs to the window
    likelihood. Dropping it would weight each gap by how often it fits in a
    window and bias the hazard upwards.
    """
    tr = _checked_transitions(batch, tr)
    h_rows = gather_hidden(hidden, tr)
    n = dm.mean(transition_nll(head, h_rows, tr, conditional=False))
    target = dm.Tensor((tr.duration / TAU_SCALE_MINUTES).reshape(-1, 1))
    d = dm.mean(dm.abs(head.duration(h_rows) - target))
    return n + cfg.alpha * d, n, d


def init_base_rate(head: IntensityHead, rate_per_hour: float, offset: float = 3.0, gate_start: float = 0.25):
    """Start the head near a constant hazard of ``rate_per_hour``.

    The gate bias is set so the gate starts near ``gate_start``, leaving room
    to raise the hazard ``1 / gate_start``-fold at busy times of day. The
    output offset moves the softplus towards its identity regime and the skip
    slope is chosen so that slope * mean initial gate * sigmoid(offset) equals
    the rate. The tanh path then only has to learn departures from a
    memoryless law, and the tail hazard does not start near zero.
    """
    if not rate_per_hour > 0:
        raise ValueError(f"rate must be positive, got {rate_per_hour}")
    if not 0 < gate_start < 1:
        raise ValueError(f"gate_start must lie in (0, 1), got {gate_start}")
    head.b_p.data[...] = math.log(gate_start / (1.0 - gate_start))
    tod = np.repeat(np.arange(N_TIME_OF_DAY), N_DAY_OF_WEEK)
    dow = np.tile(np.arange(N_DAY_OF_WEEK), N_TIME_OF_DAY)
    with dm.no_grad():
        g0 = float(head.gate(tod, dow).data.mean())
    slope = rate_per_hour / (g0 / (1.0 + math.exp(-offset)))
    head.s_raw.data[...] = math.log(math.expm1(slope)) if slope < 30 else slope
    head.c.data[...] = offset


def rig_linear(head: IntensityHead, c: float, gate_one: bool = True):
    """Set the head so that ``raw(tau) = const + c * tau`` exactly in float64.

    The hidden path is switched off (softplus(-800) underflows to 0), the
    skip weight becomes ``c`` and a large output offset puts the softplus in
    its identity regime. With ``gate_one`` the gate saturates to exactly 1,
    otherwise gate parameters are zeroed so the gate is 0.5.
    """
    head.v_raw.data[...] = -800.0
    head.s_raw.data[...] = math.log(math.expm1(c)) if c < 30 else c
    head.c.data[...] = 60.0
    head.W_p.data[...] = 0.0
    head.b_p.data[...] = 800.0 if gate_one else 0.0
