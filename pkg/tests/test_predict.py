import math

import numpy as np
import pytest

from stgnpp import datasets as D
from stgnpp import diffmath as dm
from stgnpp import predict as P
from stgnpp import synthgen as sg
from stgnpp.encoder import EncoderConfig
from stgnpp.intensity import HeadConfig, IntensityHead, rig_linear
from stgnpp.model import STGNPP, ModelConfig
from stgnpp.params import ParamStore

D_MODEL = 8
TINY = ModelConfig(encoder=EncoderConfig(d_model=D_MODEL, n_heads=2, n_stacks=1, gcn_layers=1, adaptive_dim=2),
                   head=HeadConfig(hidden=8, periodic_dim=4))


def make_head(seed=0):
    return IntensityHead(ParamStore(np.random.default_rng(seed)), D_MODEL, HeadConfig(hidden=8))


@pytest.fixture(scope="module")
def homo():
    return D.simulate_dataset(3, 4, 2, scenario="homogeneous")


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0, 5.0])
def test_rigged_median(c):
    head = make_head()
    rig_linear(head, c)
    tau = P.predict_time(head, np.zeros(D_MODEL), 0, 0)
    assert abs(tau[0] - math.log(2) / c) < 1e-6


def test_rigged_median_with_elapsed_and_half_gate():
    head = make_head()
    rig_linear(head, 2.0)
    tau = P.predict_time(head, np.zeros((2, D_MODEL)), 0, 0, elapsed=np.array([0.0, 1.5]))
    assert tau == pytest.approx([math.log(2) / 2, 1.5 + math.log(2) / 2], abs=1e-6)
    rig_linear(head, 2.0, gate_one=False)
    assert P.predict_time(head, np.zeros(D_MODEL), 0, 0)[0] == pytest.approx(math.log(2), abs=1e-6)


def test_slow_hazard_needs_bracket_doubling():
    head = make_head()
    rig_linear(head, 0.01)
    assert P.predict_time(head, np.zeros(D_MODEL), 0, 0)[0] == pytest.approx(100 * math.log(2), abs=1e-5)


def test_divergent_hazard():
    head = make_head()
    rig_linear(head, 1e-6)
    with pytest.raises(P.DivergentHazardError):
        P.predict_time(head, np.zeros(D_MODEL), 0, 0)
    out = P.predict_time(head, np.zeros(D_MODEL), 0, 0, strict=False)
    assert out[0] == 6.0 * 2 ** P.MAX_DOUBLINGS


def test_root_residual_for_random_heads():
    rng = np.random.default_rng(1)
    for seed in range(5):
        head = make_head(seed)
        h = rng.standard_normal((20, D_MODEL))
        tod, dow = rng.integers(0, 288, 20), rng.integers(0, 7, 20)
        tau = P.predict_time(head, h, tod, dow, strict=False)
        with dm.no_grad():
            cum = head.cumulative_intensity(h, tau, tod, dow).data[:, 0]
            dens = head.intensity_density(h, tau, tod, dow).data[:, 0]
        ok = tau < 6.0 * 2 ** P.MAX_DOUBLINGS
        assert np.all(np.abs(cum - math.log(2))[ok] <= 1e-6 * np.maximum(dens[ok], 1.0))


def test_negative_elapsed_rejected():
    with pytest.raises(ValueError):
        P.predict_time(make_head(), np.zeros(D_MODEL), 0, 0, elapsed=-1.0)


def test_duration_prediction_clamped():
    head = make_head()
    head.W_d.data[...] = 0.0
    head.b_d.data[...] = -1.0
    assert P.predict_duration(head, np.zeros((1, D_MODEL)))[0] == 1.0
    head.b_d.data[...] = 0.5
    assert P.predict_duration(head, np.zeros((1, D_MODEL)))[0] == 30.0


def test_metrics_report_text_round_trip():
    rep = P.MetricsReport(0.25, 12.5, 3.0, 40, 7)
    text = rep.to_text()
    assert text == "nll=0.25\nmae_t=12.5\nmae_d=3.0\nn_eval=40\nn_excluded=7\n"
    assert P.MetricsReport.from_text(text) == rep


def test_predictions_report():
    e = np.zeros(2)
    p = P.Predictions(e, np.array([0, 1]), np.array([10.0, 20.0]), np.array([5.0, 5.0]),
                      np.array([12.0, 17.0]), np.array([6.0, 8.0]), np.array([0.5, 1.5]))
    rep = p.report(3)
    assert (rep.mae_t, rep.mae_d, rep.nll, rep.n_eval, rep.n_excluded) == (2.5, 2.0, 1.0, 2, 3)
    empty = P.Predictions(*(np.zeros(0) for _ in range(7))).report(4)
    assert math.isnan(empty.mae_t) and empty.n_eval == 0 and empty.n_excluded == 4


def test_historical_average_by_hand():
    g = sg.gen_graph(2, 1, 0)
    evs = [[sg.CongestionEvent(0, t, 10.0) for t in (0.0, 40.0, 100.0, 400.0, 5000.0)], []]
    ds = D.Dataset(g, evs, sg.gen_speeds(g, evs, 100.0, 0), 100.0)
    ha = P.HistoricalAverage.fit(ds)
    # the onset at 5000 min lies past the training split; link 1 falls back to the pooled mean
    mean_gap = np.mean([30.0, 50.0, 290.0])
    assert ha.mean_gap == pytest.approx([mean_gap, mean_gap], abs=1e-12)
    assert ha.mean_duration.tolist() == [10.0, 10.0]
    preds = ha.predict([D.build_sample(ds, 72, 72)])
    assert preds.link.tolist() == [0]
    assert preds.t_pred[0] == pytest.approx(mean_gap) and preds.t_true[0] == 40.0
    assert preds.d_pred[0] == 10.0 and preds.d_true[0] == 10.0
    assert preds.nll[0] == pytest.approx(40.0 / mean_gap + math.log(mean_gap / 60.0), abs=1e-12)


def test_oracle_median_is_constant_on_homogeneous_data(homo):
    samples, _ = D.make_samples(homo, "test")
    o = P.oracle_predictions(homo, samples)
    assert len(o.link) > 10
    assert np.allclose(o.t_pred, 60 * math.log(2) / 2, atol=1e-6)
    assert np.allclose(o.nll, 2 * o.t_true / 60 - math.log(2), atol=1e-9)


def test_model_predictions_are_well_formed(homo):
    model = STGNPP(TINY, homo.graph.adjacency, seed=0)
    samples, _ = D.make_samples(homo, "test")
    rep, preds = P.evaluate(model, homo, "test")
    n_targets = sum(int(s.target_mask.sum()) for s in samples)
    assert rep.n_eval == len(preds.link) == n_targets
    assert rep.n_excluded == P.count_excluded(samples)
    assert np.all(preds.t_pred >= 0) and np.all(preds.d_pred >= 1.0)
    assert np.all(np.isfinite(preds.nll))
    truth = np.concatenate([s.target_wait_min[s.target_mask > 0] for s in samples])
    assert np.array_equal(np.sort(preds.t_true), np.sort(truth))
    every = P.predict_samples(model, samples, targets_only=False)
    assert len(every.link) == sum(int((s.history_lengths() > 0).sum()) for s in samples)


def test_scored_transitions_match_oracle_spans(homo):
    model = STGNPP(TINY, homo.graph.adjacency, seed=1)
    samples, _ = D.make_samples(homo, "val")
    sc = P.score_transitions(model, samples)
    assert np.all(sc.stop_h > sc.start_h)
    on = P.oracle_transition_nll(homo, sc)
    # homogeneous truth: 2 * span - ln 2 for every transition
    assert np.allclose(on, 2 * (sc.stop_h - sc.start_h) - math.log(2), atol=1e-9)
    batch = D.collate(samples)
    tr = batch.events.transitions()
    inner = ~sc.is_target
    assert np.allclose(np.sort(sc.stop_h[inner] - sc.start_h[inner]), np.sort(tr.tau[~tr.is_target]), atol=1e-12)


def test_whole_gap_scoring(homo):
    model = STGNPP(TINY, homo.graph.adjacency, seed=1)
    samples, _ = D.make_samples(homo, "val")
    cond = P.score_transitions(model, samples)
    whole = P.score_transitions(model, samples, conditional=False)
    inner = ~cond.is_target
    assert np.array_equal(whole.is_target, cond.is_target)
    assert np.array_equal(whole.nll[inner], cond.nll[inner])
    assert np.array_equal(whole.start_h[inner], cond.start_h[inner])
    gaps = np.concatenate([s.target_gap[s.target_mask > 0] for s in samples])
    tgt = whole.is_target
    assert np.allclose(np.sort(whole.stop_h[tgt] - whole.start_h[tgt]), np.sort(gaps), atol=1e-12)
    # a longer span under the same hazard can only cost more
    assert np.all(whole.nll[tgt] >= cond.nll[tgt] - 1e-12)


def test_empty_split():
    g = sg.gen_graph(2, 1, 0)
    ds = D.Dataset(g, [[], []], sg.gen_speeds(g, [[], []], 48.0, 0), 48.0)
    model = STGNPP(TINY, g.adjacency)
    with pytest.raises(P.EmptySplitError):
        P.evaluate(model, ds, "test")
