"""The round loop: helper search and refresh, client sampling, and the baselines.

Round ``t`` (1-based) runs, in order: helper replacement for every client
while ``t < F``; helper refresh for every client when ``t % nu == 0``;
sampling of ``ceil(tau K)`` clients; the per-client phase (aggregate,
pseudo-label, train) for sampled clients; uploads committed in client-id
order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .events import EventKind, RoundEvent
from .federation import (Channel, ClientState, HelperEntry, ServerPool, aggregate, fill_count,
                         local_train, lowest_ranked, score_helpers, score_params, select_pseudo_labels,
                         upload, weighted_average)
from .ledger import CostLedger, ReconcileReport, as_fraction, reconcile
from .metrics import RoundMetrics, client_pseudo_label_mistakes, round_metrics
from .rng import make_rng

METHODS = ("um_pfssl", "fedavg_semi", "local_only")


@dataclass(frozen=True)
class RoundConfig:
    client_count: int = 100
    sample_rate: float = 0.1
    helper_list_size: int = 5
    replacements: int = 2
    search_rounds: int = 30
    update_period: int = 10
    rounds: int = 200
    local_epochs: int = 5
    mc_samples: int = 10
    batch_size: int = 64
    objective: str = "sequential"
    restrict_to_sampled: bool = False
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        K, M, R = self.client_count, self.helper_list_size, self.replacements
        if K < 1:
            raise ConfigError("client_count must be positive")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ConfigError("sample_rate must lie in (0, 1]")
        if M < 1:
            raise ConfigError("helper_list_size must be at least 1")
        if not 0 <= R <= M - 1:
            raise ConfigError(f"replacements R={R} must satisfy 0 <= R <= M-1={M - 1} (self is never replaced)")
        if not 1 <= self.n_sampled <= K:
            raise ConfigError("ceil(sample_rate * client_count) must lie in [1, client_count]")
        if self.update_period < 1:
            raise ConfigError("update_period must be at least 1")
        if self.search_rounds < 0 or self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("search_rounds, rounds and local_epochs must be non-negative")
        if self.mc_samples < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("mc_samples, batch_size and workers must be positive")
        if self.objective not in ("sequential", "weighted"):
            raise ConfigError(f"unknown objective {self.objective!r}")

    @property
    def n_sampled(self) -> int:
        # decimal value of tau, so 0.1 * 100 is exactly 10
        return math.ceil(as_fraction(self.sample_rate) * self.client_count)

    def bound_args(self) -> tuple:
        return (self.client_count, self.helper_list_size, self.rounds, self.update_period,
                self.search_rounds, self.replacements, self.sample_rate)


@dataclass
class Trace:
    config: RoundConfig
    method: str
    ablation: str
    clients: list[ClientState]
    ledger: CostLedger
    events: list[RoundEvent] = field(default_factory=list)
    metrics: list[RoundMetrics] = field(default_factory=list)
    helper_history: list[dict[int, tuple[int, ...]]] = field(default_factory=list)
    sampled_history: list[tuple[int, ...]] = field(default_factory=list)
    report: ReconcileReport | None = None
    violations: list[str] = field(default_factory=list)

    @property
    def final_params(self) -> list[np.ndarray]:
        return [c.params for c in self.clients]


def sample_clients(config: RoundConfig, rnd: int) -> list[int]:
    """Uniform draw without replacement of ``ceil(tau K)`` client ids, sorted."""
    m = config.n_sampled
    if m >= config.client_count:
        return list(range(config.client_count))
    rng = make_rng(config.seed, "sampling", rnd)
    return sorted(int(i) for i in rng.choice(config.client_count, size=m, replace=False))


def _draw_peers(client: ClientState, K: int, count: int, rng) -> list[int]:
    pool_ids = [j for j in range(K) if j not in client.helpers]
    count = min(count, len(pool_ids))
    if count == 0:
        return []
    return [int(pool_ids[i]) for i in rng.choice(len(pool_ids), size=count, replace=False)]


def fill_helpers(client: ClientState, channel: Channel, rnd: int, seed: int, events: list) -> None:
    """Top the helper list up to ``min(M, K)`` with random peers."""
    K = len(channel.pool)
    need = fill_count(client, K)
    if need == 0:
        return
    rng = make_rng(seed, "fill", rnd, client.id)
    for j in _draw_peers(client, K, need, rng):
        params, version = channel.download(j, rnd)
        client.helpers.add(HelperEntry(j, params, version))
        events.append(RoundEvent(rnd, EventKind.FILL, client.id, j, 1))


def replace_helper(client: ClientState, channel: Channel, R: int, rnd: int, seed: int,
                   events: list) -> None:
    """Try to swap the ``R`` least relevant peers for ``R`` randomly drawn, unseen candidates.

    Candidates sorted by score (best first) meet marked incumbents sorted
    worst first; a swap happens only on strict improvement.
    """
    if R == 0:
        return
    scores = score_helpers(client, rnd)
    marked = lowest_ranked(client, scores, R)
    K = len(channel.pool)
    rng = make_rng(seed, "candidates", rnd, client.id)
    drawn = _draw_peers(client, K, R, rng)
    if len(drawn) < R:
        events.append(RoundEvent(rnd, EventKind.SKIP, client.id, None, 0))
    candidates = []
    for r in drawn:
        params, version = channel.download(r, rnd)
        events.append(RoundEvent(rnd, EventKind.REPLACE, client.id, r, 1))
        candidates.append(HelperEntry(r, params, version, score_params(client, r, params, version, rnd)))
    candidates.sort(key=lambda e: (-e.corr.value, e.client_id))
    for cand, j in zip(candidates, marked):
        if cand.corr.value > scores[j].value:
            client.helpers.swap(j, cand)
        else:
            break


def update_helper(client: ClientState, channel: Channel, R: int, rnd: int, events: list) -> None:
    """Refresh retained helpers whose pool copy is newer than the cached one.

    The ``R`` lowest-ranked peers are not refreshed; the owner entry tracks
    the live model and costs nothing.
    """
    scores = score_helpers(client, rnd)
    low = set(lowest_ranked(client, scores, R))
    for j in client.helpers.peer_ids():
        if j in low:
            continue
        entry = client.helpers[j]
        if channel.pool.version[j] > entry.cached_version:
            entry.params, entry.cached_version = channel.download(j, rnd)
            events.append(RoundEvent(rnd, EventKind.UPDATE, client.id, j, 1))
        else:
            events.append(RoundEvent(rnd, EventKind.SKIP, client.id, j, 0))


def seed_pool(clients: list[ClientState], ledger: CostLedger, events: list) -> ServerPool:
    """Every client duplicates its (warmed-up) model to the pool; charged to round 0."""
    pool = ServerPool([c.params for c in clients])
    for c in clients:
        ledger.record_upload(0)
        events.append(RoundEvent(0, EventKind.UPLOAD, c.id, None, 1))
    return pool


def _client_phase(client: ClientState, channel: Channel, config: RoundConfig, rnd: int, method: str):
    events = [RoundEvent(rnd, EventKind.SAMPLE, client.id)]
    if method == "um_pfssl":
        fill_helpers(client, channel, rnd, config.seed, events)
        aggregate(client, rnd)
        events.append(RoundEvent(rnd, EventKind.AGGREGATE, client.id))
    labels = select_pseudo_labels(client, rnd)
    events.append(RoundEvent(rnd, EventKind.PSEUDO_LABEL, client.id))
    mistakes = client_pseudo_label_mistakes(client.data, labels)
    local_train(client, labels, config.local_epochs, rnd, config.batch_size, config.objective)
    events.append(RoundEvent(rnd, EventKind.TRAIN, client.id))
    return events, mistakes


def _map_clients(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def run(config: RoundConfig, clients: list[ClientState], pool: ServerPool | None = None,
        ledger: CostLedger | None = None, ablation: str = "en+ta") -> Trace:
    """Run the helper-selection protocol for ``config.rounds`` rounds.

    Clients must share an initial model and be warmed up. Without a
    ``pool`` one is seeded from the clients and helper lists are filled at
    round 0; both are charged to round 0 of the ledger.
    """
    _check_clients(config, clients)
    ledger = ledger if ledger is not None else CostLedger()
    trace = Trace(config, "um_pfssl", ablation, clients, ledger)
    if config.rounds == 0:
        return _finish(trace)
    if pool is None:
        pool = seed_pool(clients, ledger, trace.events)
    channel = Channel(pool, ledger)
    for c in clients:
        fill_helpers(c, channel, 0, config.seed, trace.events)

    for t in range(1, config.rounds + 1):
        pool.round = t
        sampled = sample_clients(config, t)
        active = sampled if config.restrict_to_sampled else range(config.client_count)
        if t < config.search_rounds:
            for k in active:
                replace_helper(clients[k], channel, config.replacements, t, config.seed, trace.events)
        if t % config.update_period == 0:
            for k in active:
                update_helper(clients[k], channel, config.replacements, t, trace.events)

        results = _map_clients(lambda k: _client_phase(clients[k], channel, config, t, "um_pfssl"),
                               sampled, config.workers)
        mistakes = [0, 0]
        for events, (wrong, total) in results:
            trace.events.extend(events)
            mistakes[0] += wrong
            mistakes[1] += total
        for k in sampled:
            upload(clients[k], channel, t)
            trace.events.append(RoundEvent(t, EventKind.UPLOAD, k, None, 1))
        _end_round(trace, t, sampled, tuple(mistakes))
    return _finish(trace)


def run_baseline(config: RoundConfig, clients: list[ClientState], kind: str,
                 ledger: CostLedger | None = None) -> Trace:
    """``local_only``: no communication, self pseudo-labels. ``fedavg_semi``: uniform global
    averaging of sampled clients' models, self pseudo-labels from the broadcast model."""
    if kind not in ("fedavg_semi", "local_only"):
        raise ConfigError(f"unknown baseline {kind!r}")
    _check_clients(config, clients)
    ledger = ledger if ledger is not None else CostLedger()
    trace = Trace(config, kind, "none", clients, ledger)
    if config.rounds == 0:
        return _finish(trace)
    global_params = None
    if kind == "fedavg_semi":
        for c in clients:
            ledger.record_upload(0)
            trace.events.append(RoundEvent(0, EventKind.UPLOAD, c.id, None, 1))
        global_params = weighted_average([c.params for c in clients], [1.0] * len(clients))

    for t in range(1, config.rounds + 1):
        sampled = sample_clients(config, t)
        if kind == "fedavg_semi":
            for k in sampled:
                ledger.record_download(t)
                trace.events.append(RoundEvent(t, EventKind.BROADCAST, k, None, 1))
                clients[k].set_params(global_params)
        results = _map_clients(lambda k: _client_phase(clients[k], None, config, t, kind),
                               sampled, config.workers)
        mistakes = [0, 0]
        for events, (wrong, total) in results:
            trace.events.extend(events)
            mistakes[0] += wrong
            mistakes[1] += total
        if kind == "fedavg_semi":
            for k in sampled:
                ledger.record_upload(t)
                trace.events.append(RoundEvent(t, EventKind.UPLOAD, k, None, 1))
            global_params = weighted_average([clients[k].params for k in sampled], [1.0] * len(sampled))
            # evaluation uses the shared global model on every personal test set
            for c in clients:
                c.set_params(global_params)
        _end_round(trace, t, sampled, tuple(mistakes))
    return _finish(trace)


def _check_clients(config: RoundConfig, clients) -> None:
    if len(clients) != config.client_count:
        raise ConfigError(f"config expects {config.client_count} clients, got {len(clients)}")


def _end_round(trace: Trace, t: int, sampled, mistakes) -> None:
    trace.sampled_history.append(tuple(sampled))
    trace.helper_history.append({c.id: tuple(c.helpers.ids()) for c in trace.clients})
    trace.metrics.append(round_metrics(t, trace.clients, mistakes, trace.ledger))


def _finish(trace: Trace) -> Trace:
    trace.report = reconcile(trace.ledger, trace.events, *trace.config.bound_args())
    trace.violations = audit(trace)
    return trace


def audit(trace: Trace) -> list[str]:
    """Protocol conformance and accounting checks over a finished trace."""
    rc = trace.config
    problems = []
    for e in trace.events:
        if e.kind is EventKind.REPLACE and e.round >= rc.search_rounds:
            problems.append(f"Replace event at round {e.round} >= F={rc.search_rounds}")
        if e.kind is EventKind.UPDATE and e.round % rc.update_period != 0:
            problems.append(f"Update event at round {e.round} off the nu={rc.update_period} grid")
    for t, lists in enumerate(trace.helper_history, start=1):
        for k, ids in lists.items():
            if len(ids) > rc.helper_list_size:
                problems.append(f"round {t}: client {k} holds {len(ids)} > M helpers")
            if k not in ids:
                problems.append(f"round {t}: client {k} evicted itself")
            if len(set(ids)) != len(ids):
                problems.append(f"round {t}: client {k} has duplicate helpers")
    for c in trace.clients:
        problems.extend(c.helpers.check())
        if not np.all(np.isfinite(c.params)):
            problems.append(f"client {c.id}: non-finite parameters")
    if trace.method == "um_pfssl" and trace.report is not None:
        problems.extend(trace.report.problems)
    elif trace.report is not None:
        problems.extend(p for p in trace.report.problems if "exceeds bound" not in p)
    return problems
