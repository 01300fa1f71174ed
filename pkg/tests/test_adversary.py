import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import clients_contacting
from posthorn import adversary, codec, crypto, simulator
from posthorn.adversary import Action, HeaderEvent, HeaderTrace
from posthorn.crypto import Suite
from posthorn.simulator import SenderSpec, SimConfig, node_url


def ev(tick, cid, url="http://node0.mix.example/mix", method="POST", size=6000):
    return HeaderEvent(tick, cid, method, url, method == "POST", size, 7000)


# -- projection ----------------------------------------------------------------------------


def test_project_empty():
    assert adversary.project([]).events == []


def test_projection_schema_and_idempotence():
    rep = simulator.run(SimConfig(n_surfers=20, trickle=True, max_ticks=30, seed=2))
    ht = adversary.project(rep.trace)
    assert len(ht) == len(rep.trace) > 0
    names = [f.name for f in dataclasses.fields(HeaderEvent)]
    assert names == ["tick", "client_id", "method", "url", "referer_present", "request_size", "response_size"]
    assert "client_role" not in names and "body_digest" not in names
    assert adversary.project(ht) == ht


# -- anonymity sets ---------------------------------------------------------------------------


def test_no_cover_means_singleton():
    ht = HeaderTrace([ev(0, "s", method="GET"), ev(0, "s")])
    assert adversary.anonymity_set(ht, Action(node_url(0), 0, 0)) == {"s"}


def test_sender_plus_k_surfers():
    k = 12
    box = codec.mailbox_id(1)
    cfg = SimConfig(n_nodes=1, n_linkers=1, n_surfers=k, senders=[SenderSpec(b"x", [0], box)],
                    surfer_visit_rate=0.5, trickle=True, seed=4, max_ticks=40)
    sim = simulator.Simulation(cfg)
    rep = sim.run()
    ht = adversary.project(rep.trace)
    got = adversary.anonymity_set(ht, Action(node_url(0), 0, 39))
    assert got == clients_contacting(rep.trace, "node0.mix.example", 0, 39)
    assert len(got) == k + 1
    senders = {c for c, r in sim.labels().items() if r == "SENDER"}
    assert senders <= got


def test_windows_partition():
    rep = simulator.run(SimConfig(n_surfers=30, trickle=True, max_ticks=40, seed=6))
    ht = adversary.project(rep.trace)
    url = node_url(1)
    early = adversary.anonymity_set(ht, Action(url, 0, 19))
    late = adversary.anonymity_set(ht, Action(url, 20, 39))
    assert early | late == adversary.anonymity_set(ht, Action(url, 0, 39))
    assert early == clients_contacting(rep.trace, "node1.mix.example", 0, 19)
    assert late == clients_contacting(rep.trace, "node1.mix.example", 20, 39)


@settings(max_examples=200)
@given(base=st.lists(st.tuples(st.integers(0, 20), st.sampled_from("abcde")), min_size=1, max_size=20),
       extra=st.lists(st.tuples(st.integers(5, 15), st.sampled_from("vwxyz")), max_size=10))
def test_monotone_in_surfer_visits(base, extra):
    base = [(0, "s"), (20, "s")] + base  # keeps the window inside the trace
    ht = HeaderTrace(sorted((ev(t, c) for t, c in base), key=lambda e: e.tick))
    more = HeaderTrace(sorted((ev(t, c) for t, c in base + extra), key=lambda e: e.tick))
    action = Action(node_url(0), 5, 15)
    assert adversary.anonymity_set(ht, action) <= adversary.anonymity_set(more, action)


def test_unknown_action():
    ht = HeaderTrace([ev(0, "s")])
    with pytest.raises(adversary.DomainError):
        adversary.anonymity_set(ht, Action(node_url(5), 0, 0))
    with pytest.raises(adversary.DomainError):
        adversary.anonymity_set(ht, Action(node_url(0), 3, 1))
    with pytest.raises(adversary.DomainError):
        adversary.anonymity_set(HeaderTrace(), Action(node_url(0), 0, 1))


def test_delivery_action_window():
    box = codec.mailbox_id(1)
    cfg = SimConfig(n_surfers=5, senders=[SenderSpec(b"x", [0], box, start_tick=3)], max_ticks=5)
    rep = simulator.SimReport([17], [True], [], {}, {}, [])
    assert adversary.delivery_action(cfg, rep, 0) == Action(node_url(0), 3, 17)
    with pytest.raises(adversary.DomainError):
        adversary.delivery_action(cfg, simulator.SimReport([None], [False], [], {}, {}, []), 0)


# -- distinguisher -------------------------------------------------------------------------------


def synthetic(n=150, leak=True):
    events, labels = [], {}
    for i in range(2 * n):
        cid, positive = f"c{i:04d}", i < n
        labels[cid] = "SENDER" if positive else "SURFER"
        size = 12000 if (positive and leak) else 6000
        events += [ev(i % 7, cid, method="GET", size=500), ev(i % 7, cid, size=size)]
    return HeaderTrace(events), labels


def test_features_per_client():
    ht = HeaderTrace([ev(0, "a", method="GET", size=400), ev(0, "a", size=6000), ev(4, "a", method="GET", size=400)])
    f = adversary.client_features(ht)["a"]
    assert f == (3.0, 1.5, pytest.approx(1 / 3), 4.0, 6000.0)


def test_stump_detects_size_leak():
    ht, labels = synthetic()
    res = adversary.distinguisher(ht, labels)
    assert res.accuracy == 1.0 and "max_request_size" in res.rule
    assert 0.0 <= res.accuracy <= 1.0 and res.n_trials == 150


def test_no_signal_no_accuracy():
    ht, labels = synthetic(leak=False)
    assert adversary.distinguisher(ht, labels).accuracy <= 0.55


def test_shuffled_labels_near_chance():
    rep = simulator.run(SimConfig(n_surfers=400, trickle=True, max_ticks=60, seed=8))
    labels = {c: ("SENDER" if i % 2 else "SURFER") for i, c in enumerate(sorted({e.client_id for e in rep.trace}))}
    res = adversary.distinguisher(adversary.project(rep.trace), adversary.shuffled_labels(labels))
    assert abs(res.accuracy - 0.5) <= 0.1


def test_sample_size_error():
    ht, labels = synthetic(n=50)
    with pytest.raises(adversary.SampleSizeError):
        adversary.distinguisher(ht, labels)


def test_shuffle_preserves_label_counts():
    labels = {f"c{i}": ("SENDER" if i < 30 else "SURFER") for i in range(100)}
    sh = adversary.shuffled_labels(labels, seed=1)
    assert sorted(sh.values()) == sorted(labels.values()) and sh != labels


# -- DoS -------------------------------------------------------------------------------------------


def test_drain_without_acks():
    rep = adversary.dos_drain(False, 200, pool_size=5)
    assert rep.drain_fetch is not None and rep.pending_series[-1] == 0
    assert all(a >= b for a, b in zip(rep.pending_series, rep.pending_series[1:]))
    assert rep.delivered < 5


def test_acks_survive_attack():
    rep = adversary.dos_drain(True, 2000, pool_size=5)
    assert rep.drain_fetch is None and rep.min_pending_during_attack == 5
    assert rep.delivered == 5 and rep.final_pool == 0 and rep.final_ack_table == 0


# -- re-send linkage ------------------------------------------------------------------------------


def test_repeated_bodies_counts():
    assert adversary.repeated_bodies([b"a", b"b", b"a", None, b"a"]) == 2
    assert adversary.repeated_bodies([]) == 0


def test_byte_suite_resends_repeat():
    scan = adversary.resend_leak(Suite.TEST, 200)
    assert scan.sends > 1 and scan.repeats >= 1


def test_trace_repeats_uses_digests():
    mk = lambda d: simulator.TraceEvent(0, "c", "SURFER", "POST", "u", None, 1, 1, "CARRIER", d)
    assert adversary.trace_repeats([mk("x"), mk("y"), mk("x")]) == 1


def test_matching_game_small():
    acc = adversary.ure_matching_game(crypto.TEST256, 400, seed=1)
    assert 0.35 <= acc <= 0.65
