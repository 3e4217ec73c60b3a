from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saflbench import protocol as P
from saflbench.config import RunConfig
from saflbench.metrics import transmission_bytes
from saflbench.model import Batch, ModelSpec, ParamVector, backward, parameter_count
from saflbench.seeding import make_rng
from saflbench.simulation import run_safl, run_sfl

SPEC = ModelSpec.softmax(3, 2)


def make_client(n: int = 6, *, epochs: int = 1, batch_size: int | None = None, lr: float = 0.1, seed: int = 0):
    rng = np.random.default_rng(seed)
    data = Batch(rng.standard_normal((n, 3)), rng.integers(0, 2, n))
    return P.ClientState(
        client_id=3,
        data=data,
        params=ParamVector(np.zeros(parameter_count(SPEC)), SPEC),
        local_epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        latency=P.LatencyProfile(1.0),
        train_rng=make_rng(seed, 5, 3),
        latency_rng=make_rng(seed, 6, 3),
    )


def grad_update(cid: int, values, *, base: int = 0, n: int = 1) -> P.Update:
    return P.Update(cid, P.GRADIENT, ParamVector(np.asarray(values, dtype=float), SPEC), n, base)


def weight_update(cid: int, values, n: int) -> P.Update:
    return P.Update(cid, P.WEIGHTS, ParamVector(np.asarray(values, dtype=float), SPEC), n, 0)


# --------------------------------------------------------------------------
# local training


def test_full_batch_single_epoch_payloads():
    client = make_client()
    start = ParamVector(np.linspace(-1, 1, parameter_count(SPEC)), SPEC)
    g = backward(start, client.data)
    upd, final = P.local_train(client, start, client.train_rng, strategy="fedsgd")
    np.testing.assert_array_equal(upd.payload.values, g.values)
    np.testing.assert_array_equal(final.values, start.values - 0.1 * g.values)
    assert upd.kind == P.GRADIENT and upd.sample_count == 6
    assert upd.upload_bytes == transmission_bytes(len(start), "gradient")
    upd, final2 = P.local_train(client, start, client.train_rng, strategy="fedavg", metadata_bytes=10)
    np.testing.assert_array_equal(upd.payload.values, final2.values)
    np.testing.assert_array_equal(final2.values, final.values)
    assert upd.upload_bytes == transmission_bytes(len(start), "weights", 10)


def test_minibatch_payload_is_weighted_trajectory_sum():
    # Payload = sum over steps of |B|/n * g(w_step); trajectory replayed by hand.
    client = make_client(n=5, epochs=2, batch_size=2, lr=0.3, seed=4)
    start = ParamVector(np.full(parameter_count(SPEC), 0.2), SPEC)
    upd, final = P.local_train(client, start, make_rng(11), strategy="fedsgd")
    rng = make_rng(11)
    w = start.values.copy()
    acc = np.zeros_like(w)
    for _ in range(2):
        order = rng.permutation(5)
        for s in range(0, 5, 2):
            idx = order[s : s + 2]
            b = Batch(client.data.features[idx], client.data.labels[idx])
            g = backward(ParamVector(w, SPEC), b).values
            acc += len(idx) / 5 * g
            w = w - 0.3 * g
    np.testing.assert_allclose(upd.payload.values, acc, rtol=0, atol=1e-15)
    np.testing.assert_allclose(final.values, w, rtol=0, atol=1e-15)


def test_full_batch_payload_equals_scaled_displacement():
    client = make_client(epochs=4, lr=0.3)
    start = ParamVector(np.full(parameter_count(SPEC), 0.2), SPEC)
    upd, final = P.local_train(client, start, client.train_rng, strategy="fedsgd")
    np.testing.assert_allclose(start.values - final.values, 0.3 * upd.payload.values, atol=1e-14)


def test_grad_at_start_uses_start_weights():
    client = make_client(epochs=3)
    start = ParamVector(np.full(parameter_count(SPEC), 0.5), SPEC)
    upd, _ = P.local_train(client, start, client.train_rng, strategy="fedsgd", grad_at_start=True)
    np.testing.assert_allclose(upd.payload.values, 3 * backward(start, client.data).values, atol=1e-15)


def test_payload_clipping():
    client = make_client()
    start = ParamVector(np.full(parameter_count(SPEC), 3.0), SPEC)
    upd, _ = P.local_train(client, start, client.train_rng, strategy="fedsgd", clip_norm=1e-3)
    assert upd.payload.norm() <= 1e-3 * (1 + 1e-12)


def test_start_params_not_mutated():
    client = make_client(epochs=2, batch_size=2)
    start = ParamVector(np.ones(parameter_count(SPEC)), SPEC)
    before = start.values.copy()
    P.local_train(client, start, client.train_rng, strategy="fedavg")
    np.testing.assert_array_equal(start.values, before)


# --------------------------------------------------------------------------
# aggregation


def test_fedsgd_is_unweighted_mean():
    w = ParamVector(np.ones(8), SPEC)
    ups = [grad_update(0, np.full(8, 2.0), n=100), grad_update(1, np.full(8, 4.0), n=1)]
    np.testing.assert_array_equal(P.aggregate_fedsgd(ups, w, 0.5).values, np.full(8, 1 - 0.5 * 3.0))


def test_fedavg_is_sample_weighted():
    ups = [weight_update(0, np.zeros(8), 3), weight_update(1, np.full(8, 4.0), 1)]
    np.testing.assert_array_equal(P.aggregate_fedavg(ups).values, np.full(8, 1.0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_fedavg_of_identical_weights_is_identity(k, seed):
    v = np.random.default_rng(seed).standard_normal(8)
    counts = np.random.default_rng(seed + 1).integers(1, 50, k)
    agg = P.aggregate_fedavg([weight_update(i, v, int(c)) for i, c in enumerate(counts)])
    np.testing.assert_allclose(agg.values, v, rtol=1e-14, atol=1e-15)


def test_aggregation_rejects_wrong_kind_or_empty():
    w = ParamVector(np.zeros(8), SPEC)
    with pytest.raises(P.ProtocolError):
        P.aggregate_fedsgd([weight_update(0, np.zeros(8), 1)], w, 1.0)
    with pytest.raises(P.ProtocolError):
        P.aggregate_fedavg([grad_update(0, np.zeros(8))])
    with pytest.raises(P.ProtocolError):
        P.aggregate_fedsgd([], w, 1.0)


# --------------------------------------------------------------------------
# staleness, selection, latency, events


def test_staleness_formula():
    assert P.staleness(grad_update(0, np.zeros(8), base=4), 5) == 0
    assert P.staleness(grad_update(0, np.zeros(8), base=2), 9) == 6
    with pytest.raises(P.ProtocolError):
        P.staleness(grad_update(0, np.zeros(8), base=5), 5)
    ups = [grad_update(0, np.zeros(8), base=1), grad_update(1, np.zeros(8), base=3)]
    assert P.accumulated_staleness(ups, 4) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))), st.integers(0, 10**6))
def test_select_active_is_sorted_distinct_subset(nk, seed):
    n, k = nk
    chosen = P.select_active(n, k, make_rng(seed))
    assert chosen == sorted(set(chosen)) and len(chosen) == k and all(0 <= c < n for c in chosen)


def test_epoch_duration_zero_jitter_is_exact_and_consumes_stream():
    rng = make_rng(1)
    assert P.draw_epoch_duration(P.LatencyProfile(2.5), rng) == 2.5
    ref = make_rng(1)
    ref.standard_normal()
    assert rng.standard_normal() == ref.standard_normal()


def test_epoch_duration_is_lognormal():
    rng = make_rng(2)
    draws = np.array([P.draw_epoch_duration(P.LatencyProfile(1.0, 0.5), rng) for _ in range(20000)])
    logs = np.log(draws)
    assert abs(logs.mean()) < 6 * 0.5 / math.sqrt(20000)
    assert abs(logs.std() - 0.5) < 0.02


def test_event_queue_orders_by_time_then_phase_then_fifo():
    q = P.EventQueue()
    q.push(P.Event(1.0, P.CLIENT_READY, 0))
    q.push(P.Event(1.0, P.UPLOAD_ARRIVES, 1))
    q.push(P.Event(0.5, P.CLIENT_READY, 2))
    q.push(P.Event(1.0, P.BROADCAST_ARRIVES, 3))
    assert [q.pop().client_id for _ in range(4)] == [2, 1, 3, 0]
    with pytest.raises(P.ProtocolError):
        q.push(P.Event(0.9, P.CLIENT_READY, 0))


def test_adopt_pending_never_moves_backwards():
    c = make_client()
    c.base_round = 5
    c.pending_model = (3, c.params)
    with pytest.raises(P.ProtocolError):
        c.adopt_pending()


# --------------------------------------------------------------------------
# loops


def small_config(**changes) -> RunConfig:
    base = RunConfig(
        num_clients=4, k=2, rounds=12, per_class=20, classes=3, dim=4,
        scheme="hetero_dirichlet", alpha=0.5, local_epochs=2, batch_size=4,
        client_lr=0.05, base_seconds=(1.0, 2.0, 3.0, 5.0), jitter_sigma=0.3,
    )
    return base.replace(**changes)


@pytest.mark.parametrize("strategy", ["fedsgd", "fedavg"])
def test_safl_staleness_nonnegative_and_buffer_size(strategy):
    trace = []
    log = run_safl(small_config(mode="safl", strategy=strategy), trace=trace)
    assert len(log.records) == 12
    assert all(len(r.participants) == 2 for r in log.records)
    assert all(s >= 0 for _, _, s in trace)
    assert [r.tau_total for r in log.records] == [
        sum(s for t, _, s in trace if t == r.round) for r in log.records
    ]
    times = [r.sim_time for r in log.records]
    assert times == sorted(times)


def test_safl_fast_clients_dominate_participation():
    log = run_safl(small_config(mode="safl", jitter_sigma=0.0, rounds=40))
    seen = np.bincount([p for r in log.records for p in r.participants], minlength=4)
    assert seen[0] > seen[3]


def test_sfl_sim_time_is_sum_of_round_maxima():
    cfg = small_config(jitter_sigma=0.0, network_delay=0.25, local_epochs=2)
    log = run_sfl(cfg)
    expected = 0.0
    base = cfg.per_client("base_seconds")
    for r in log.records:
        expected += max(2 * base[i] + 0.25 for i in r.participants)
        assert r.sim_time == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("k", [1, 3, 4])
def test_safl_consumes_exactly_k_per_round(k):
    cfg = small_config(mode="safl", k=k, rounds=15)
    trace = []
    log = run_safl(cfg, trace=trace)
    assert len(trace) == k * 15
    assert [t for t, _, _ in trace] == sorted(t for t, _, _ in trace)
    assert all(b.sim_time >= a.sim_time for a, b in zip(log.records, log.records[1:]))


def test_sfl_round_durations_positive():
    log = run_sfl(small_config())
    times = [0.0] + [r.sim_time for r in log.records]
    assert all(b > a for a, b in zip(times, times[1:]))
