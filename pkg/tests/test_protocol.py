import numpy as np
import pytest

import umpfssl.protocol as protocol
from oracles import CONFIG_DIR, make_states
from umpfssl.config import config_from_dict, parse_config
from umpfssl.errors import ConfigError
from umpfssl.events import EventKind
from umpfssl.experiment import run_experiment, setup
from umpfssl.federation import Channel, HelperEntry, ServerPool
from umpfssl.ledger import CostLedger
from umpfssl.protocol import (RoundConfig, audit, fill_helpers, replace_helper, run, run_baseline,
                              sample_clients, update_helper)
from umpfssl.uncertainty import CorrScore

DESK = CONFIG_DIR / "desk.json"


def fixed_scores(monkeypatch, table):
    """Pin the relevance of each helper id to ``table[id]``."""
    def score_params(client, j, params, vkey, rnd):
        return CorrScore(table[j], table[j], table[j], rnd)

    def score_helpers(client, rnd):
        out = {}
        for e in client.helpers:
            e.corr = score_params(client, e.client_id, e.params, 0, rnd)
            out[e.client_id] = e.corr
        return out

    monkeypatch.setattr(protocol, "score_params", score_params)
    monkeypatch.setattr(protocol, "score_helpers", score_helpers)


def world(clients, capacity):
    states = make_states(clients, capacity=capacity, warm=1)
    led = CostLedger()
    ch = Channel(ServerPool([s.params for s in states]), led)
    return states, ch, led


class TestConfig:
    def test_defaults(self):
        rc = RoundConfig()
        assert (rc.client_count, rc.sample_rate, rc.rounds, rc.helper_list_size) == (100, 0.1, 200, 5)
        assert (rc.replacements, rc.search_rounds, rc.update_period) == (2, 30, 10)
        assert rc.n_sampled == 10

    @pytest.mark.parametrize("kw", [dict(replacements=5), dict(sample_rate=0.0), dict(update_period=0),
                                    dict(helper_list_size=0), dict(objective="other")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RoundConfig(**kw)


class TestSampling:
    def test_full(self):
        assert sample_clients(RoundConfig(client_count=5, sample_rate=1.0), 3) == [0, 1, 2, 3, 4]

    def test_count_and_reproducible(self):
        rc = RoundConfig(seed=4)
        a = sample_clients(rc, 7)
        assert len(a) == 10 and len(set(a)) == 10
        assert a == sample_clients(rc, 7)
        assert a != sample_clients(rc, 8)


class TestReplace:
    def test_better_candidate_replaces_worst(self, small_clients, monkeypatch):
        states, ch, led = world(small_clients, capacity=3)
        c = states[0]
        c.helpers.add(HelperEntry(1, states[1].params, 0))
        c.helpers.add(HelperEntry(2, states[2].params, 0))
        fixed_scores(monkeypatch, {0: 0.5, 1: 0.1, 2: 0.6, 3: 0.9, 4: 0.9, 5: 0.9})
        events = []
        replace_helper(c, ch, 1, 1, 0, events)
        assert 1 not in c.helpers and len(c.helpers) == 3
        assert led.downloads == 1
        assert [e.kind for e in events] == [EventKind.REPLACE]

    def test_worse_candidates_leave_list_but_are_charged(self, small_clients, monkeypatch):
        states, ch, led = world(small_clients, capacity=3)
        c = states[0]
        c.helpers.add(HelperEntry(1, states[1].params, 0))
        c.helpers.add(HelperEntry(2, states[2].params, 0))
        fixed_scores(monkeypatch, {0: 0.5, 1: 0.4, 2: 0.6, 3: 0.0, 4: 0.0, 5: 0.0})
        replace_helper(c, ch, 2, 1, 0, [])
        assert c.helpers.ids() == [0, 1, 2]
        assert led.downloads == 2

    def test_self_never_replaced(self, small_clients, monkeypatch):
        states, ch, _ = world(small_clients, capacity=2)
        c = states[0]
        c.helpers.add(HelperEntry(1, states[1].params, 0))
        fixed_scores(monkeypatch, {0: 0.0, 1: 0.5, 2: 1.0, 3: 1.0, 4: 1.0, 5: 1.0})
        replace_helper(c, ch, 1, 1, 0, [])
        assert 0 in c.helpers and 1 not in c.helpers

    def test_walkthrough_eight_clients(self, small_data):
        from umpfssl.data import PartitionSpec, build_clients
        clients = build_clients(small_data, PartitionSpec(8, 0.5, seed=1))
        states, ch, led = world(clients, capacity=5)
        fill_helpers(states[0], ch, 0, 0, [])
        assert len(states[0].helpers) == 5
        before = led.downloads
        held = set(states[0].helpers.ids())
        events = []
        replace_helper(states[0], ch, 2, 1, 0, events)
        assert led.downloads - before == 2
        drawn = [e.peer_id for e in events if e.kind is EventKind.REPLACE]
        assert len(drawn) == 2 and not set(drawn) & held and len(set(drawn)) == 2

    def test_few_candidates_logs_skip(self, small_clients, monkeypatch):
        states, ch, led = world(small_clients[:3], capacity=3)
        c = states[0]
        fill_helpers(c, ch, 0, 0, [])
        events = []
        replace_helper(c, ch, 2, 1, 0, events)
        assert [e.kind for e in events] == [EventKind.SKIP]


class TestUpdate:
    def _setup(self, small_clients, monkeypatch):
        states, ch, led = world(small_clients, capacity=4)
        c = states[0]
        for j in (1, 2, 3):
            c.helpers.add(HelperEntry(j, ch.pool.models[j], ch.pool.version[j]))
        fixed_scores(monkeypatch, {0: 0.5, 1: 0.1, 2: 0.6, 3: 0.7, 4: 0.0, 5: 0.0})
        return c, ch, led

    def test_nothing_uploaded(self, small_clients, monkeypatch):
        c, ch, led = self._setup(small_clients, monkeypatch)
        update_helper(c, ch, 1, 10, [])
        assert led.downloads == 0

    def test_one_bumped_helper(self, small_clients, monkeypatch):
        c, ch, led = self._setup(small_clients, monkeypatch)
        ch.pool.store(2, np.ones_like(ch.pool.models[2]))
        update_helper(c, ch, 1, 10, [])
        assert led.downloads == 1
        assert np.array_equal(c.helpers[2].params, np.ones_like(c.params))

    def test_lowest_ranked_not_refreshed(self, small_clients, monkeypatch):
        c, ch, led = self._setup(small_clients, monkeypatch)
        ch.pool.store(1, np.ones_like(ch.pool.models[1]))
        update_helper(c, ch, 1, 10, [])
        assert led.downloads == 0


class TestRun:
    def _config(self, **kw):
        base = dict(client_count=6, sample_rate=0.5, helper_list_size=3, replacements=1, search_rounds=3,
                    update_period=2, rounds=5, local_epochs=1, mc_samples=3, batch_size=16, seed=2)
        base.update(kw)
        return RoundConfig(**base)

    def test_zero_rounds(self, small_clients):
        states = make_states(small_clients, warm=1)
        before = [s.params for s in states]
        trace = run(self._config(rounds=0), states)
        assert trace.events == [] and trace.ledger.total == 0
        assert all(np.array_equal(a, s.params) for a, s in zip(before, states))

    def test_self_only_degenerates(self, small_clients):
        states = make_states(small_clients[:2], capacity=1, warm=1)
        rc = RoundConfig(client_count=2, sample_rate=1.0, helper_list_size=1, replacements=0,
                         search_rounds=3, update_period=1, rounds=4, local_epochs=1, mc_samples=2)
        trace = run(rc, states)
        assert not any(e.is_download for e in trace.events)
        assert trace.violations == []

    def test_audit_and_bound(self, small_clients):
        trace = run(self._config(), make_states(small_clients, warm=1))
        assert trace.violations == []
        assert trace.report.ok
        assert trace.ledger.total - trace.ledger.initial_total <= trace.report.bound
        assert len(trace.metrics) == 5

    def test_worst_case_reached(self, small_clients):
        # tau=1 means every peer uploads each round, so every retained helper is stale at
        # each update; F=2 keeps freshly swapped-in helpers off the update rounds
        trace = run(self._config(sample_rate=1.0, rounds=6, search_rounds=2), make_states(small_clients, warm=1))
        assert trace.ledger.total - trace.ledger.initial_total == trace.report.worst_case
        assert trace.report.worst_case <= trace.report.bound

    def test_audit_flags_injected_violation(self, small_clients):
        trace = run(self._config(), make_states(small_clients, warm=1))
        from umpfssl.events import RoundEvent
        trace.events.append(RoundEvent(4, EventKind.REPLACE, 0, 1, 0))
        trace.events.append(RoundEvent(3, EventKind.UPDATE, 0, 1, 0))
        problems = audit(trace)
        assert any("Replace" in p for p in problems) and any("Update" in p for p in problems)

    def test_client_count_mismatch(self, small_clients):
        with pytest.raises(ConfigError):
            run(self._config(client_count=7), make_states(small_clients, warm=1))


class TestBaselines:
    def test_local_only_has_no_traffic(self, small_clients):
        trace = run_baseline(TestRun()._config(), make_states(small_clients, capacity=1, warm=1), "local_only")
        assert trace.ledger.total == 0
        assert trace.violations == []

    def test_fedavg_identical_updates(self, small_clients):
        states = make_states(small_clients[:2], capacity=1, warm=0)
        rc = RoundConfig(client_count=2, sample_rate=1.0, helper_list_size=1, replacements=0,
                         rounds=1, local_epochs=0, mc_samples=2)
        trace = run_baseline(rc, states, "fedavg_semi")
        assert np.array_equal(states[0].params, states[1].params)
        assert trace.ledger.downloads == 2

    def test_fedavg_hand_average(self, small_clients):
        states = make_states(small_clients[:2], capacity=1, warm=0)
        states[0].set_params(np.zeros_like(states[0].params))
        states[1].set_params(np.full_like(states[1].params, 4.0))
        rc = RoundConfig(client_count=2, sample_rate=1.0, helper_list_size=1, replacements=0,
                         rounds=1, local_epochs=0, mc_samples=2)
        run_baseline(rc, states, "fedavg_semi")
        assert np.all(states[0].params == 2.0)

    def test_unknown_kind(self, small_clients):
        with pytest.raises(ConfigError):
            run_baseline(TestRun()._config(), make_states(small_clients, warm=1), "gossip")


class TestDeterminism:
    def test_desk_replay_bitwise(self):
        cfg = parse_config(DESK).with_overrides(**{"protocol.rounds": 8})
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a.final_params, b.final_params))
        assert [e.row() for e in a.events] == [e.row() for e in b.events]

    def test_threads_match_sequential(self):
        cfg = parse_config(DESK).with_overrides(**{"protocol.rounds": 4})
        a = run_experiment(cfg)
        b = run_experiment(cfg.with_overrides(**{"protocol.workers": 4}))
        assert all(np.array_equal(x, y) for x, y in zip(a.final_params, b.final_params))

    def test_setup_shared_initial_model(self):
        cfg = config_from_dict({"method": "local_only", "dataset": {"class_count": 3, "per_class": 20},
                                "partition": {"client_count": 3}, "training": {"warmup_epochs": 0}})
        _, clients = setup(cfg)
        assert all(np.array_equal(clients[0].params, c.params) for c in clients)
