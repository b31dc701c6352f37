import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stgnpp import diffmath as dm
from stgnpp import eventseq as es
from stgnpp.eventseq import EventSequenceBatch, FlowConfig
from stgnpp.params import ParamStore

D = 6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def numpy_gru(x, h, P, pre):
    r = sigmoid(x @ P[f"{pre}.r.W"] + h @ P[f"{pre}.r.U"] + P[f"{pre}.r.b"])
    z = sigmoid(x @ P[f"{pre}.z.W"] + h @ P[f"{pre}.z.U"] + P[f"{pre}.z.b"])
    g = np.tanh(x @ P[f"{pre}.h.W"] + (r * h) @ P[f"{pre}.h.U"] + P[f"{pre}.h.b"])
    return z * h + (1 - z) * g


def numpy_flow(h, tau, P, pre):
    tau = tau.reshape(-1, 1)
    z = sigmoid(tau @ P[f"{pre}.z.w_tau"] + h @ P[f"{pre}.z.U"] + P[f"{pre}.z.b"])
    r = sigmoid(tau @ P[f"{pre}.r.w_tau"] + h @ P[f"{pre}.r.U"] + P[f"{pre}.r.b"])
    g = np.tanh(tau @ P[f"{pre}.g.w_tau"] + (r * h) @ P[f"{pre}.g.U"] + P[f"{pre}.g.b"])
    return h + np.tanh(tau @ P[f"{pre}.W_tau"]) * (1 - z) * (g - h)


def make_gru(seed=0):
    store = ParamStore(np.random.default_rng(seed))
    return store, es.ContinuousGRU(store, D, FlowConfig(2))


def batch_from(seqs):
    """Build a padded batch from lists of (gap_hours, duration_min, tod, dow)."""
    L = max((len(s) for s in seqs), default=0)
    S = len(seqs)
    arr = {k: np.zeros((S, L)) for k in ("gap", "dur", "tod", "dow", "mask")}
    for i, s in enumerate(seqs):
        for j, (gap, dur, tod, dow) in enumerate(s):
            arr["gap"][i, j], arr["dur"][i, j] = gap, dur
            arr["tod"][i, j], arr["dow"][i, j], arr["mask"][i, j] = tod, dow, 1
    return EventSequenceBatch(arr["dur"], arr["gap"], arr["tod"], arr["dow"], arr["mask"])


_SETUP = make_gru(11)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (D,), elements=st.floats(-1e3, 1e3)))
def test_flow_is_identity_at_zero(h):
    _, gru = _SETUP
    out = es.gru_flow_step(h, 0.0, gru.flow_layers).data
    assert np.array_equal(out, h)


def test_flow_matches_numpy_oracle():
    store, gru = make_gru(1)
    P = {k: v for k, v in store.state().items()}
    h = np.random.default_rng(2).standard_normal((4, D))
    tau = np.array([0.1, 0.5, 2.0, 7.0])
    ref = numpy_flow(numpy_flow(h, tau, P, "seq.flow0"), tau, P, "seq.flow1")
    out = es.gru_flow_step(h, tau, gru.flow_layers).data
    assert np.allclose(out, ref, rtol=0, atol=1e-13)


def test_flow_rejects_negative_time():
    _, gru = make_gru()
    with pytest.raises(ValueError):
        es.gru_flow_step(np.zeros(D), -0.1, gru.flow_layers)


def test_flow_stays_bounded_for_large_gaps():
    _, gru = make_gru()
    h = np.random.default_rng(3).uniform(-1, 1, (5, D))
    out = es.gru_flow_step(h, np.full(5, 1e6), gru.flow_layers).data
    # each layer moves at most |g - h| past h, so two layers from |h| <= 1 stay within 7
    assert np.all(np.isfinite(out)) and np.all(np.abs(out) <= 7.0)


def test_discrete_step_matches_numpy_oracle():
    store, gru = make_gru(4)
    P = store.state()
    rng = np.random.default_rng(5)
    x, h = rng.standard_normal(D), rng.standard_normal(D)
    out = es.discrete_gru_step(x, h, gru.cell).data
    assert np.allclose(out, numpy_gru(x[None], h[None], P, "seq.gru")[0], rtol=0, atol=1e-13)


def test_unroll_matches_manual_recurrence():
    store, gru = make_gru(6)
    P = store.state()
    b = batch_from([[(0.0, 10, 1, 0), (0.7, 20, 5, 0), (1.5, 5, 9, 1)]])
    He = np.random.default_rng(7).standard_normal((1, 3, D))
    out = gru.unroll(b, dm.Tensor(He)).data[0]
    h = np.zeros((1, D))
    for i, gap in enumerate([0.0, 0.7, 1.5]):
        if i:
            h = numpy_flow(numpy_flow(h, np.array([gap]), P, "seq.flow0"), np.array([gap]), P, "seq.flow1")
        h = numpy_gru(He[:, i], h, P, "seq.gru")
        assert np.allclose(out[i], h[0], rtol=0, atol=1e-12)


def test_padding_is_neutral_in_unroll():
    _, gru = make_gru(8)
    seq = [(0.0, 10, 1, 0), (0.4, 12, 2, 0)]
    alone = batch_from([seq])
    padded = batch_from([seq, seq + [(0.3, 8, 3, 0), (0.2, 8, 3, 0)]])
    He = np.random.default_rng(9).standard_normal((2, 4, D))
    a = gru.unroll(alone, dm.Tensor(He[:1, :2])).data
    p = gru.unroll(padded, dm.Tensor(He)).data
    # BLAS may round differently for a different row count
    assert np.allclose(p[0, :2], a[0], rtol=0, atol=1e-14)
    assert np.all(p[0, 2:] == 0)


def test_empty_batch_unrolls_to_empty():
    _, gru = make_gru()
    b = batch_from([[], []])
    assert gru.unroll(b, dm.Tensor(np.zeros((2, 0, D)))).shape == (2, 0, D)


def test_transitions_enumerate_consecutive_pairs_and_targets():
    b = batch_from([[(0.0, 10, 1, 0), (0.5, 20, 2, 0), (0.25, 30, 3, 0)], [(0.0, 5, 7, 6)], []])
    b.target_mask = np.array([1.0, 1.0, 1.0])
    b.target_gap = np.array([2.0, 3.0, 4.0])
    b.target_elapsed = np.array([1.0, 0.5, 0.0])
    b.target_duration = np.array([11.0, 12.0, 13.0])
    tr = b.transitions()
    assert tr.seq.tolist() == [0, 0, 0, 1]
    assert tr.pos.tolist() == [0, 1, 2, 0]
    assert tr.tau.tolist() == [0.5, 0.25, 2.0, 3.0]
    assert tr.elapsed.tolist() == [0, 0, 1.0, 0.5]
    assert tr.duration.tolist() == [20, 30, 11, 12]
    assert tr.time_of_day.tolist() == [1, 2, 3, 7]
    assert tr.is_target.tolist() == [False, False, True, True]
    assert len(tr.subset(tr.is_target)) == 2


def test_pad_to_keeps_transitions():
    b = batch_from([[(0.0, 10, 1, 0), (0.5, 20, 2, 0)]])
    wide = b.pad_to(5)
    assert wide.l_max == 5
    assert wide.transitions().tau.tolist() == b.transitions().tau.tolist()
    with pytest.raises(ValueError):
        wide.pad_to(2)


@pytest.mark.parametrize("field,value", [("inter_event", -1.0), ("durations", 0.0)])
def test_batch_validation(field, value):
    arrays_ = dict(durations=np.ones((1, 2)), inter_event=np.zeros((1, 2)), time_of_day=np.zeros((1, 2)),
                   day_of_week=np.zeros((1, 2)), mask=np.ones((1, 2)))
    arrays_[field][0, 1] = value
    with pytest.raises(ValueError):
        EventSequenceBatch(**arrays_)


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(0)


def test_unroll_gradients():
    store, gru = make_gru(10)
    b = batch_from([[(0.0, 10, 1, 0), (0.7, 20, 5, 0)], [(0.0, 5, 1, 0)]])
    Hc = dm.Tensor(np.random.default_rng(11).standard_normal((2, 2, D)))
    w = np.random.default_rng(12).standard_normal((2, 2, D))
    params = [store["seq.flow0.W_tau"], store["seq.flow1.g.U"], store["seq.gru.z.W"], store["seq.embed.W"]]
    rep = dm.grad_check(lambda: dm.sum(gru.unroll(b, gru.embed(Hc, b)) * w), params, tol=1e-5)
    assert rep.passed, rep
