"""The full model: state encoder, event sequence encoder and intensity head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .datasets import ModelBatch
from .diffmath import Tensor
from .encoder import Encoder, EncoderConfig
from .eventseq import ContinuousGRU, FlowConfig
from .intensity import HeadConfig, IntensityHead, LossConfig, total_loss
from .params import ParamStore


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)


class STGNPP:
    def __init__(self, cfg: ModelConfig, adjacency: np.ndarray, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(np.random.default_rng(seed))
        D = cfg.encoder.d_model
        self.encoder = Encoder(cfg.encoder, adjacency, self.store)
        self.seq = ContinuousGRU(self.store, D, cfg.flow)
        self.head = IntensityHead(self.store, D, cfg.head)

    def parameters(self):
        return list(self.store)

    def hidden(self, batch: ModelBatch) -> Tensor:
        """Hidden state after every history event, ``[B*N, L, D]``."""
        Hg = self.encoder.forward(batch.features)
        Hc = dm.as_tensor(batch.selection) @ Hg
        B, N, L, D = Hc.shape
        Hc = dm.reshape(Hc, (B * N, L, D))
        return self.seq.unroll(batch.events, self.seq.embed(Hc, batch.events))

    def loss(self, batch: ModelBatch):
        """``(total, nll, duration_mae_hours)`` over every scored transition in the batch."""
        return total_loss(self.head, self.hidden(batch), batch.events, self.cfg.loss)
