"""Seeded mini-batch training with Adam, validation-based model selection and resumable checkpoints."""
from __future__ import annotations

import csv
import json
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import diffmath as dm
from .config import RunConfig
from .datasets import Dataset, WindowSample, collate, make_samples, split_ranges
from .intensity import EmptyBatchError, init_base_rate
from .model import STGNPP

LOG_FIELDS = ["epoch", "step", "lr", "train_loss", "train_nll", "train_dur", "val_loss", "val_nll", "val_dur"]


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


@dataclass
class TrainState:
    model: STGNPP
    opt: Adam
    rng: np.random.Generator
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: OrderedDict | None = None
    stale: int = 0
    log: list[dict] = field(default_factory=list)


def evaluate_loss(model: STGNPP, samples: list[WindowSample], batch_size: int) -> tuple[float, float, float]:
    """Transition-weighted mean ``(total, nll, duration)`` over ``samples``."""
    sums = np.zeros(3)
    count = 0
    with dm.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i:i + batch_size])
            tr = batch.events.transitions()
            # no graph is kept here, so a full batch fits in memory
            if len(tr) == 0:
                continue
            out = model.loss(batch)
            sums += len(tr) * np.array([t.item() for t in out])
            count += len(tr)
    if count == 0:
        return math.nan, math.nan, math.nan
    return tuple(sums / count)


def training_rate(ds: Dataset, fractions=(0.6, 0.2, 0.2)) -> float:
    """Pooled onsets per hour of quiet time (event end to next onset) in the training span."""
    lo, hi = split_ranges(ds.horizon_min, fractions)["train"]
    gaps = [b.t_occ - a.end for evs in ds.events for a, b in zip(evs, evs[1:]) if lo <= a.t_occ and b.t_occ < hi]
    total = sum(gaps)
    return len(gaps) / (total / 60.0) if total > 0 else 1.0


def new_state(ds: Dataset, cfg: RunConfig) -> TrainState:
    model = STGNPP(cfg.model_config(), ds.graph.adjacency, cfg.seed)
    init_base_rate(model.head, training_rate(ds, cfg.fractions))
    return TrainState(model, Adam(model.parameters(), cfg.lr), np.random.default_rng([cfg.seed, 7]))


def train(ds: Dataset, cfg: RunConfig, out_dir=None, state: TrainState | None = None,
          echo=None) -> TrainState:
    """Train for ``cfg.epochs`` epochs (or until ``cfg.max_minutes`` elapse) and restore the best
    validation parameters. With ``out_dir`` the log and checkpoints are written there.
    """
    train_s, skipped = make_samples(ds, "train", cfg.window_slots, cfg.fractions)
    val_s, _ = make_samples(ds, "val", cfg.window_slots, cfg.fractions)
    if not train_s:
        raise EmptyBatchError("no training windows with events")
    if echo and skipped:
        echo(f"skipped {skipped} training windows without events")
    st = state or new_state(ds, cfg)
    params = st.model.parameters()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    step = st.opt.t
    while st.epoch < cfg.epochs:
        order = st.rng.permutation(len(train_s))
        sums = np.zeros(3)
        count = 0
        for i in range(0, len(order), cfg.batch_size):
            windows = [train_s[j] for j in order[i:i + cfg.batch_size]]
            parts = [collate(windows[k:k + cfg.micro_batch]) for k in range(0, len(windows), cfg.micro_batch)]
            counts = [len(b.events.transitions()) for b in parts]
            n = sum(counts)
            if n == 0:
                continue
            st.model.store.zero_grad()
            for batch, c in zip(parts, counts):
                if c == 0:
                    continue
                # the batch loss is a mean over transitions, so each part is weighted by its share
                total, nll, dur = st.model.loss(batch)
                (total * (c / n)).backward()
                sums += c * np.array([total.item(), nll.item(), dur.item()])
            clip_grad_norm(params, cfg.grad_clip)
            st.opt.step()
            step += 1
            count += n
        st.epoch += 1
        val = evaluate_loss(st.model, val_s, cfg.batch_size) if val_s else (math.nan,) * 3
        row = dict(zip(LOG_FIELDS, [st.epoch, step, st.opt.lr, *(sums / max(count, 1)), *val]))
        st.log.append(row)
        score = val[0] if val_s else row["train_loss"]
        if score < st.best_val:
            st.best_val, st.best_epoch = float(score), st.epoch
            st.best_params = st.model.store.state()
            st.stale = 0
        else:
            st.stale += 1
            if cfg.lr_decay < 1.0 and st.stale >= cfg.lr_patience:
                st.opt.lr *= cfg.lr_decay
                st.stale = 0
        if echo:
            echo(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
        if out is not None:
            write_log(out / "train_log.csv", st.log)
            save_checkpoint(out / "checkpoint.bin", st, cfg)
        if cfg.max_minutes > 0 and (time.monotonic() - started) / 60.0 >= cfg.max_minutes:
            break
    if st.best_params is not None:
        st.model.store.load_state(st.best_params)
    return st


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def write_log(path, rows: list[dict]):
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.DictWriter(f, LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def save_checkpoint(path, st: TrainState, cfg: RunConfig, resumable: bool = True):
    """Best parameters first; with ``resumable`` also the live parameters and Adam moments."""
    best = st.best_params or st.model.store.state()
    arrays = OrderedDict(best)
    arrays["fixed/adjacency"] = st.model.encoder.adjacency
    extras = {"best_epoch": st.best_epoch, "best_val": st.best_val if math.isfinite(st.best_val) else None,
              "epoch": st.epoch, "stale": st.stale, "adam": {"lr": st.opt.lr, "beta1": st.opt.b1, "beta2": st.opt.b2,
                                          "eps": st.opt.eps}}
    if resumable:
        for p, m, v in zip(st.opt.params, st.opt.m, st.opt.v):
            arrays[f"live/{p.name}"] = p.data
            arrays[f"adam.m/{p.name}"] = m
            arrays[f"adam.v/{p.name}"] = v
        extras.update(adam_t=st.opt.t, rng=json.loads(json.dumps(st.rng.bit_generator.state)),
                      log=st.log)
    checkpoint.save(path, arrays, cfg.to_text(), extras)


def load_model(path, adjacency=None) -> tuple[STGNPP, RunConfig, dict]:
    """Rebuild the model from a checkpoint with its best parameters loaded."""
    arrays, config_text, extras = checkpoint.load(path)
    cfg = RunConfig.from_text(config_text)
    names = [k for k in arrays if "/" not in k]
    n_links = arrays["enc.adaptive.alpha1"].shape[0]
    if adjacency is None:
        adjacency = arrays["fixed/adjacency"]
    elif np.asarray(adjacency).shape[0] != n_links:
        raise checkpoint.CheckpointError(f"checkpoint has {n_links} links, graph has {np.asarray(adjacency).shape[0]}")
    model = STGNPP(cfg.model_config(), adjacency, cfg.seed)
    model.store.load_state(OrderedDict((k, arrays[k]) for k in names))
    return model, cfg, extras


def resume_state(path, ds: Dataset) -> tuple[TrainState, RunConfig]:
    arrays, config_text, extras = checkpoint.load(path)
    if "adam_t" not in extras:
        raise checkpoint.CheckpointError(f"{path} has no optimiser state")
    cfg = RunConfig.from_text(config_text)
    st = new_state(ds, cfg)
    names = st.model.store.names()
    st.model.store.load_state(OrderedDict((k, arrays[f"live/{k}"]) for k in names))
    for i, p in enumerate(st.opt.params):
        st.opt.m[i][...] = arrays[f"adam.m/{p.name}"]
        st.opt.v[i][...] = arrays[f"adam.v/{p.name}"]
    st.opt.t = int(extras["adam_t"])
    st.opt.lr = float(extras["adam"]["lr"])
    st.stale = int(extras["stale"])
    st.rng.bit_generator.state = extras["rng"]
    st.epoch = int(extras["epoch"])
    st.best_epoch = int(extras["best_epoch"])
    st.best_val = math.inf if extras["best_val"] is None else float(extras["best_val"])
    st.best_params = OrderedDict((k, arrays[k]) for k in names)
    st.log = [dict(r) for r in extras["log"]]
    return st, cfg
