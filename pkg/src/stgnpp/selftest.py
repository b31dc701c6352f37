"""Fast property checks run by ``stgnpp selftest``; each prints one PASS/FAIL line."""
from __future__ import annotations

import math

import numpy as np

from . import diffmath as dm


def _head(rng, D=8):
    from .intensity import HeadConfig, IntensityHead
    from .params import ParamStore
    return IntensityHead(ParamStore(rng), D, HeadConfig(hidden=8, periodic_dim=4))


def check_hazard(rng) -> bool:
    head = _head(rng)
    h = rng.standard_normal((200, 8))
    tod = rng.integers(0, 288, 200)
    dow = rng.integers(0, 7, 200)
    taus = np.sort(rng.uniform(0, 10, (200, 20)), axis=1)
    with dm.no_grad():
        zero = head.cumulative_intensity(h, np.zeros(200), tod, dow).data
        cums = np.stack([head.cumulative_intensity(h, taus[:, j], tod, dow).data[:, 0] for j in range(20)], 1)
        dens = head.intensity_density(h, taus[:, 5], tod, dow).data
    return bool(np.all(zero == 0) and np.all(np.diff(cums, axis=1) >= -1e-12) and np.all(dens >= 0))


def check_median(rng) -> bool:
    from .intensity import rig_linear
    from .predict import predict_time
    head = _head(rng)
    ok = True
    for c in (0.5, 1.0, 2.0, 5.0):
        rig_linear(head, c)
        tau = predict_time(head, np.zeros(8), 0, 0)[0]
        ok &= abs(tau - math.log(2) / c) < 1e-6
    return bool(ok)


def check_flow_identity(rng) -> bool:
    from .eventseq import GRUFlowLayer, gru_flow_step
    from .params import ParamStore
    store = ParamStore(rng)
    layers = [GRUFlowLayer(store, f"f{i}", 8) for i in range(2)]
    h = rng.standard_normal((50, 8))
    return bool(np.array_equal(gru_flow_step(h, np.zeros(50), layers).data, h))


def check_causality(rng) -> bool:
    from .encoder import Encoder, EncoderConfig
    from .params import ParamStore
    cfg = EncoderConfig(d_model=8, n_heads=2, n_stacks=2, gcn_layers=2, adaptive_dim=3, window_slots=8)
    enc = Encoder(cfg, np.eye(3), ParamStore(rng))
    x = rng.standard_normal((3, 8, 2))
    with dm.no_grad():
        base = enc.forward(x).data
        for t in range(7):
            y = x.copy()
            y[:, t + 1:] += rng.standard_normal(y[:, t + 1:].shape)
            if not np.array_equal(enc.forward(y).data[:, :t + 1], base[:, :t + 1]):
                return False
    return True


def check_backends(rng) -> bool:
    from . import _kernels_py, kernels
    from . import synthgen as sg
    if kernels.BACKEND != "compiled":
        return True
    g = sg.gen_graph(5, 2, 3)
    gt = sg.GroundTruthIntensity.for_graph(g, 1.0, sg.peak_profile(), beta=0.3)
    a = sg.simulate_events(g, gt, 48.0, 11)
    saved = {k: getattr(kernels, k) for k in ("thin_chunk",)}
    try:
        kernels.thin_chunk = _kernels_py.thin_chunk
        b = sg.simulate_events(g, gt, 48.0, 11)
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)
    return a == b


def check_grad(rng) -> bool:
    from .params import ParamStore
    store = ParamStore(rng)
    W = store.glorot("W", (4, 3))
    x = dm.Tensor(rng.standard_normal((5, 4)))

    def f():
        return dm.sum(dm.softplus(x @ W) * dm.tanh(x @ W))

    return dm.grad_check(f, [W], tol=1e-6).passed


CHECKS = [
    ("hazard_well_formed", check_hazard),
    ("rigged_median", check_median),
    ("flow_identity_at_zero", check_flow_identity),
    ("encoder_causality", check_causality),
    ("simulator_backends_agree", check_backends),
    ("gradient_check", check_grad),
]


def run(seed: int = 0, echo=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        passed = fn(np.random.default_rng([seed, len(name)]))
        echo(f"{'PASS' if passed else 'FAIL'} {name}")
        ok &= passed
    return ok
