"""Client and server state and the per-client steps of a training round.

A sampled client aggregates its helpers' models weighted by relevance,
pseudo-labels its unlabeled data with the least uncertain helper, trains
locally and uploads. Helper models are cached copies; the client's own
entry always tracks its live parameters.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset
from .errors import ProtocolError
from .ledger import CostLedger
from .nn import NetSpec, OptimState, batch_loss, loss_and_grad, sgd_step
from .rng import derive_seed, make_rng
from .uncertainty import (CorrScore, PredictiveDistribution, entropy, helper_accuracy, mc_probs,
                          score_from_parts)

AGG_EPS = 1e-9


@dataclass
class HelperEntry:
    client_id: int
    params: np.ndarray
    cached_version: int
    corr: CorrScore | None = None


class HelperList:
    """At most ``capacity`` cached helper models, always including the owner."""

    def __init__(self, owner_id: int, capacity: int, owner_params: np.ndarray, owner_version: int = 0):
        if capacity < 1:
            raise ProtocolError("helper list capacity must be at least 1")
        self.owner_id = owner_id
        self.capacity = capacity
        self._entries: dict[int, HelperEntry] = {owner_id: HelperEntry(owner_id, owner_params, owner_version)}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, j):
        return j in self._entries

    def __getitem__(self, j) -> HelperEntry:
        return self._entries[j]

    def __iter__(self):
        return (self._entries[j] for j in self.ids())

    def ids(self) -> list[int]:
        return sorted(self._entries)

    def peer_ids(self) -> list[int]:
        return [j for j in self.ids() if j != self.owner_id]

    def add(self, entry: HelperEntry) -> None:
        if entry.client_id in self._entries:
            raise ProtocolError(f"helper {entry.client_id} already cached by client {self.owner_id}")
        if len(self._entries) >= self.capacity:
            raise ProtocolError(f"helper list of client {self.owner_id} is full")
        self._entries[entry.client_id] = entry

    def swap(self, old_id: int, entry: HelperEntry) -> None:
        if old_id == self.owner_id:
            raise ProtocolError("the owner can never be evicted from its helper list")
        if entry.client_id in self._entries:
            raise ProtocolError(f"helper {entry.client_id} already cached")
        del self._entries[old_id]
        self._entries[entry.client_id] = entry

    def check(self) -> list[str]:
        problems = []
        if len(self._entries) > self.capacity:
            problems.append(f"client {self.owner_id}: {len(self._entries)} helpers > capacity {self.capacity}")
        if self.owner_id not in self._entries:
            problems.append(f"client {self.owner_id}: owner missing from helper list")
        return problems


class ServerPool:
    """Latest uploaded model of every client plus per-client version counters."""

    def __init__(self, models):
        self.models = [_readonly(m) for m in models]
        self.version = [0] * len(self.models)
        self.round = 0

    def __len__(self):
        return len(self.models)

    def store(self, k: int, params: np.ndarray) -> int:
        self.models[k] = _readonly(params)
        self.version[k] += 1
        return self.version[k]


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


class Channel:
    """Every model transfer between clients and the pool goes through here and is charged."""

    def __init__(self, pool: ServerPool, ledger: CostLedger):
        self.pool = pool
        self.ledger = ledger
        self._lock = threading.Lock()

    def download(self, j: int, rnd: int) -> tuple[np.ndarray, int]:
        with self._lock:
            params, version = self.pool.models[j], self.pool.version[j]
        self.ledger.record_download(rnd)
        return params, version

    def upload(self, k: int, params: np.ndarray, rnd: int) -> int:
        with self._lock:
            version = self.pool.store(k, params)
        self.ledger.record_upload(rnd)
        return version


@dataclass
class ClientState:
    id: int
    spec: NetSpec
    params: np.ndarray
    opt: OptimState
    data: ClientDataset
    helpers: HelperList
    seed: int
    corr_mode: str = "en+ta"
    mc_samples: int = 10
    uncertainty_cap: int | None = None
    version: int = 0
    _cache: dict = field(default_factory=dict, repr=False)
    _cache_round: int = field(default=-1, repr=False)

    def set_params(self, params: np.ndarray) -> None:
        self.params = _readonly(params)
        self.version += 1
        own = self.helpers[self.id]
        own.params = self.params
        own.cached_version = self.version

    def begin_round(self, rnd: int) -> None:
        if rnd != self._cache_round:
            self._cache.clear()
            self._cache_round = rnd

    def version_key(self, j: int) -> int:
        return self.version if j == self.id else self.helpers[j].cached_version

    def _corr_rows(self) -> np.ndarray | None:
        cap = self.uncertainty_cap
        n = self.data.n_unlabeled
        if cap is None or n <= cap:
            return None
        rng = make_rng(self.seed, "uncertainty-subset")
        return np.sort(rng.choice(n, size=cap, replace=False))


def make_client(k: int, spec: NetSpec, w0: np.ndarray, data: ClientDataset, capacity: int, seed: int,
                learning_rate: float = 1e-4, momentum: float = 0.9, corr_mode: str = "en+ta",
                mc_samples: int = 10, uncertainty_cap: int | None = None) -> ClientState:
    params = _readonly(w0)
    return ClientState(
        id=k, spec=spec, params=params,
        opt=OptimState.zeros(spec.n_params, learning_rate, momentum),
        data=data, helpers=HelperList(k, capacity, params), seed=seed,
        corr_mode=corr_mode, mc_samples=mc_samples, uncertainty_cap=uncertainty_cap,
    )


# --- helper evaluation -----------------------------------------------------

def mc_seed(client: ClientState, rnd: int, j: int, version_key: int) -> int:
    return derive_seed(client.seed, "mc", rnd, j, version_key)


def helper_predictions(client: ClientState, j: int, params: np.ndarray, version_key: int, rnd: int,
                       rows: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """MC-dropout probabilities and entropies of helper ``j`` on the client's unlabeled rows.

    Cached per (helper, version, row subset) for the current round.
    """
    client.begin_round(rnd)
    key = ("mc", j, version_key, None if rows is None else rows.size)
    hit = client._cache.get(key)
    if hit is None:
        X = client.data.unlabeled_x if rows is None else client.data.unlabeled_x[rows]
        if X.shape[0] == 0:
            hit = (np.zeros((0, client.spec.class_count)), np.zeros(0))
        else:
            P = mc_probs(client.spec, params, X, client.mc_samples, mc_seed(client, rnd, j, version_key))
            hit = (P, entropy(P))
        client._cache[key] = hit
    return hit


def _accuracy(client: ClientState, j: int, params: np.ndarray, version_key: int) -> float:
    key = ("acc", j, version_key)
    hit = client._cache.get(key)
    if hit is None:
        hit = helper_accuracy(client.spec, params, client.data.labeled_x, client.data.labeled_y)
        client._cache[key] = hit
    return hit


def score_params(client: ClientState, j: int, params: np.ndarray, version_key: int, rnd: int) -> CorrScore:
    """Relevance of model ``params`` (belonging to client ``j``) to ``client``."""
    rows = client._corr_rows()
    _, ents = helper_predictions(client, j, params, version_key, rnd, rows)
    acc = _accuracy(client, j, params, version_key)
    score = score_from_parts(float(np.sum(ents)), ents.shape[0], acc, client.data.labeled_ratio,
                             client.data.class_count,
                             "en+ta" if client.corr_mode == "random" else client.corr_mode, rnd)
    if client.corr_mode == "random":
        draw = make_rng(client.seed, "random-corr", rnd, j, version_key).random()
        score = CorrScore(float(draw), score.entropy_term, score.accuracy_term, rnd, "random")
    return score


def score_helpers(client: ClientState, rnd: int) -> dict[int, CorrScore]:
    """Recompute the relevance of every cached helper and store it on the entries."""
    scores = {}
    for entry in client.helpers:
        entry.corr = score_params(client, entry.client_id, entry.params, client.version_key(entry.client_id), rnd)
        scores[entry.client_id] = entry.corr
    return scores


def lowest_ranked(client: ClientState, scores: dict[int, CorrScore], R: int) -> list[int]:
    """The ``R`` lowest-scored peers (never the owner), worst first; ties rank the higher id lower."""
    peers = [j for j in scores if j != client.id]
    peers.sort(key=lambda j: (scores[j].value, -j))
    return peers[:R]


# --- aggregation -----------------------------------------------------------

def weighted_average(params_list, weights) -> np.ndarray:
    """``sum_j w_j p_j / sum_j w_j`` accumulated in list order."""
    if len(params_list) != len(weights) or not params_list:
        raise ProtocolError("need one weight per parameter vector")
    shape = np.shape(params_list[0])
    total = 0.0
    acc = np.zeros(shape)
    for p, w in zip(params_list, weights):
        if np.shape(p) != shape:
            raise ProtocolError(f"parameter layout mismatch: {np.shape(p)} vs {shape}")
        acc = acc + w * p
        total = total + w
    return acc / total


def aggregate(client: ClientState, rnd: int) -> np.ndarray:
    """Relevance-weighted average of the helper list; keeps own params if all weights vanish."""
    scores = score_helpers(client, rnd)
    ids = client.helpers.ids()
    weights = [scores[j].value for j in ids]
    for j in ids:
        if client.helpers[j].params.shape != client.params.shape:
            raise ProtocolError(f"helper {j} has a parameter layout that does not match client {client.id}")
    if sum(weights) < AGG_EPS:
        return client.params
    new = weighted_average([client.helpers[j].params for j in ids], weights)
    client.set_params(new)
    return client.params


# --- pseudo-labeling -------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabel:
    target: PredictiveDistribution
    source_helper: int
    uncertainty: float


def select_min_entropy(ids, probs_per_helper, entropies_per_helper) -> list[PseudoLabel]:
    """Per point, the helper distribution with minimum entropy; ties go to the lowest id."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    H = np.stack([entropies_per_helper[i] for i in order])
    best = np.argmin(H, axis=0)
    labels = []
    for n, b in enumerate(best):
        i = order[b]
        labels.append(PseudoLabel(PredictiveDistribution(probs_per_helper[i][n], float(H[b, n])),
                                  ids[i], float(H[b, n])))
    return labels


def select_pseudo_labels(client: ClientState, rnd: int) -> list[PseudoLabel]:
    if client.data.n_unlabeled == 0:
        return []
    ids = client.helpers.ids()
    preds = [helper_predictions(client, j, client.helpers[j].params, client.version_key(j), rnd) for j in ids]
    return select_min_entropy(ids, [p for p, _ in preds], [h for _, h in preds])


def pseudo_target_matrix(labels: list[PseudoLabel], class_count: int) -> np.ndarray:
    if not labels:
        return np.zeros((0, class_count))
    return np.stack([pl.target.probs for pl in labels])


# --- local training --------------------------------------------------------

def _batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _step(client: ClientState, params, X, targets, kind, rng) -> np.ndarray:
    seed = int(rng.integers(2 ** 62))
    _, g = loss_and_grad(client.spec, params, X, targets, kind, seed)
    params, client.opt = sgd_step(params, g, client.opt)
    return params


def _supervised_epoch(client: ClientState, params, rng, batch_size: int):
    d = client.data
    for idx in _batches(rng, d.n_labeled, batch_size):
        params = _step(client, params, d.labeled_x[idx], d.labeled_y[idx], "ce", rng)
    return params


def warmup(client: ClientState, epochs: int, batch_size: int = 64) -> ClientState:
    """Supervised-only training on the labeled set before the first round."""
    if client.data.n_labeled == 0 or epochs <= 0:
        return client
    rng = make_rng(client.seed, "warmup")
    params = np.array(client.params)
    for _ in range(epochs):
        params = _supervised_epoch(client, params, rng, batch_size)
    client.set_params(params)
    return client


OBJECTIVES = ("sequential", "weighted")


def local_train(client: ClientState, pseudo_labels: list[PseudoLabel], epochs: int, rnd: int,
                batch_size: int = 64, objective: str = "sequential") -> ClientState:
    """``epochs`` passes of supervised CE then KL-to-pseudo-target updates.

    ``objective="weighted"`` instead takes single steps on
    ``mu_k * CE + (1 - mu_k) * KL`` over paired minibatches.
    """
    d = client.data
    if len(pseudo_labels) != d.n_unlabeled:
        raise ProtocolError(f"{len(pseudo_labels)} pseudo labels for {d.n_unlabeled} unlabeled points")
    if epochs <= 0:
        return client
    targets = pseudo_target_matrix(pseudo_labels, d.class_count)
    rng = make_rng(client.seed, "train", rnd)
    params = np.array(client.params)
    for _ in range(epochs):
        if objective == "sequential":
            params = _supervised_epoch(client, params, rng, batch_size)
            for idx in _batches(rng, d.n_unlabeled, batch_size):
                params = _step(client, params, d.unlabeled_x[idx], targets[idx], "kl", rng)
        elif objective == "weighted":
            params = _weighted_epoch(client, params, targets, rng, batch_size)
        else:
            raise ProtocolError(f"unknown objective {objective!r}")
    client.set_params(params)
    return client


def _weighted_epoch(client: ClientState, params, targets, rng, batch_size: int):
    d = client.data
    mu = d.labeled_ratio
    sup = _batches(rng, d.n_labeled, batch_size)
    uns = _batches(rng, d.n_unlabeled, batch_size)
    steps = max(len(sup), len(uns))
    for s in range(steps):
        g = np.zeros_like(params)
        seed = int(rng.integers(2 ** 62))
        if sup:
            idx = sup[s % len(sup)]
            g += mu * loss_and_grad(client.spec, params, d.labeled_x[idx], d.labeled_y[idx], "ce", seed)[1]
        if uns:
            idx = uns[s % len(uns)]
            g += (1.0 - mu) * loss_and_grad(client.spec, params, d.unlabeled_x[idx], targets[idx], "kl", seed)[1]
        params, client.opt = sgd_step(params, g, client.opt)
    return params


def combined_loss(client: ClientState, pseudo_labels: list[PseudoLabel]) -> float:
    """``mu_k * mean CE + (1 - mu_k) * mean KL`` without dropout."""
    d = client.data
    mu = d.labeled_ratio
    total = 0.0
    if d.n_labeled:
        total += mu * batch_loss(client.spec, client.params, d.labeled_x, d.labeled_y, "ce")
    if d.n_unlabeled:
        targets = pseudo_target_matrix(pseudo_labels, d.class_count)
        total += (1.0 - mu) * batch_loss(client.spec, client.params, d.unlabeled_x, targets, "kl")
    return total


def upload(client: ClientState, channel: Channel, rnd: int) -> int:
    """Replace the client's model in the pool; returns the new pool version."""
    return channel.upload(client.id, client.params, rnd)


def fill_count(client: ClientState, K: int) -> int:
    return max(0, min(client.helpers.capacity, K) - len(client.helpers))

