"""Accuracy, fairness and pseudo-label quality metrics, and CSV report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import ClientDataset, reveal_hidden_labels, write_partition_csv
from .errors import DomainError
from .events import EVENT_COLUMNS
from .ledger import cost2_bound, effective_tau
from .nn import DETERMINISTIC, NetSpec, forward


def accuracy(spec: NetSpec, params: np.ndarray, X, y) -> float:
    y = np.asarray(y)
    if y.shape[0] == 0:
        raise DomainError("cannot evaluate on an empty split")
    pred = np.argmax(forward(spec, params, X, DETERMINISTIC), axis=1)
    return float(np.mean(pred == y))


def evaluate_client(client, split: str) -> float:
    """Deterministic accuracy of a client's current model on its val or test split."""
    d = client.data
    if split == "val":
        return accuracy(client.spec, client.params, d.val_x, d.val_y)
    if split == "test":
        return accuracy(client.spec, client.params, d.test_x, d.test_y)
    raise DomainError(f"unknown split {split!r}")


def fairness_variance(per_client_acc: Sequence[float]) -> float:
    """Population variance of per-client accuracies."""
    a = np.asarray(per_client_acc, dtype=np.float64)
    if a.shape[0] < 2:
        raise DomainError("fairness variance needs at least two clients")
    return float(np.mean((a - a.mean()) ** 2))


def pseudo_label_mistakes(pseudo_labels, hidden_truth) -> tuple[int, int]:
    truth = np.asarray(hidden_truth)
    if len(pseudo_labels) != truth.shape[0]:
        raise DomainError(f"{len(pseudo_labels)} pseudo labels for {truth.shape[0]} hidden labels")
    wrong = sum(int(np.argmax(pl.target.probs) != t) for pl, t in zip(pseudo_labels, truth))
    return wrong, truth.shape[0]


def pseudo_label_error(pseudo_labels, hidden_truth) -> float:
    """Fraction of points whose pseudo-label argmax differs from the hidden label (nan if none)."""
    wrong, total = pseudo_label_mistakes(pseudo_labels, hidden_truth)
    return wrong / total if total else math.nan


def client_pseudo_label_mistakes(client_data: ClientDataset, pseudo_labels) -> tuple[int, int]:
    return pseudo_label_mistakes(pseudo_labels, reveal_hidden_labels(client_data))


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    per_client_val_acc: tuple[float, ...]
    per_client_test_acc: tuple[float, ...]
    pseudo_label_error: float
    uploads: int
    downloads: int

    # clients whose split is empty carry nan and are left out of the aggregates

    @property
    def mean_val_acc(self) -> float:
        return _finite_mean(self.per_client_val_acc)

    @property
    def mean_test_acc(self) -> float:
        return _finite_mean(self.per_client_test_acc)

    @property
    def acc_variance(self) -> float:
        a = [x for x in self.per_client_test_acc if not math.isnan(x)]
        return fairness_variance(a) if len(a) >= 2 else 0.0


def _finite_mean(values) -> float:
    a = [x for x in values if not math.isnan(x)]
    return float(np.mean(a)) if a else math.nan


def _safe_eval(client, split: str) -> float:
    d = client.data
    n = d.val_y.shape[0] if split == "val" else d.test_y.shape[0]
    return evaluate_client(client, split) if n else math.nan


def round_metrics(rnd: int, clients, mistakes: tuple[int, int], ledger) -> RoundMetrics:
    wrong, total = mistakes
    return RoundMetrics(
        round=rnd,
        per_client_val_acc=tuple(_safe_eval(c, "val") for c in clients),
        per_client_test_acc=tuple(_safe_eval(c, "test") for c in clients),
        pseudo_label_error=wrong / total if total else math.nan,
        uploads=ledger.uploads,
        downloads=ledger.downloads,
    )


def best_accuracy(rounds: Sequence[RoundMetrics]) -> float:
    if not rounds:
        return math.nan
    return max(r.mean_test_acc for r in rounds)


def best_accuracy_summary(runs: Mapping[object, Sequence[RoundMetrics]]) -> dict:
    """Best mean test accuracy over rounds, independently for each run key (e.g. method, alpha)."""
    return {key: best_accuracy(rounds) for key, rounds in runs.items()}


# --- CSV reports -----------------------------------------------------------

METRICS_COLUMNS = ("round", "mean_val_acc", "mean_test_acc", "acc_variance",
                   "pseudo_label_error", "cum_uploads", "cum_downloads")
CLIENT_METRICS_COLUMNS = ("round", "client", "val_acc", "test_acc")
COSTS_COLUMNS = ("round", "uploads", "downloads", "cum_uploads", "cum_downloads", "cum_total",
                 "bound_cum", "percent_of_bound")
SUMMARY_COLUMNS = ("client", "labeled_ratio", "n_labeled", "n_unlabeled", "final_val_acc",
                   "final_test_acc", "best_test_acc", "helpers")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow(row)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def emit_reports(trace, out_dir) -> list[Path]:
    """Write metrics, client_metrics, costs, events, partition and summary CSVs."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []

    def emit(name, header, rows):
        path = out / name
        _write(path, header, rows)
        written.append(path)

    emit("metrics.csv", METRICS_COLUMNS, (
        [m.round, fmt(m.mean_val_acc), fmt(m.mean_test_acc), fmt(m.acc_variance),
         fmt(m.pseudo_label_error), m.uploads, m.downloads] for m in trace.metrics))
    emit("client_metrics.csv", CLIENT_METRICS_COLUMNS, (
        [m.round, k, fmt(v), fmt(t)]
        for m in trace.metrics
        for k, (v, t) in enumerate(zip(m.per_client_val_acc, m.per_client_test_acc))))
    emit("costs.csv", COSTS_COLUMNS, cost_rows(trace))
    emit("events.csv", EVENT_COLUMNS, (e.row() for e in trace.events))

    path = out / "partition.csv"
    try:
        write_partition_csv([c.data for c in trace.clients], path)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    written.append(path)

    emit("summary.csv", SUMMARY_COLUMNS, summary_rows(trace))
    return written


def cost_rows(trace):
    rc = trace.config
    tau = effective_tau(rc.sample_rate, rc.client_count)
    initial = trace.ledger.initial_total
    cum_u = cum_d = 0
    for t in range(0, rc.rounds + 1):
        u, d = trace.ledger.round_totals(t)
        cum_u += u
        cum_d += d
        bound = initial + cost2_bound(rc.client_count, rc.helper_list_size, t, rc.update_period,
                                      min(rc.search_rounds, t), rc.replacements, tau)
        pct = 100.0 * (cum_u + cum_d) / float(bound) if bound else 0.0
        yield [t, u, d, cum_u, cum_d, cum_u + cum_d, fmt(float(bound)), fmt(pct)]


def summary_rows(trace):
    for k, client in enumerate(trace.clients):
        tests = [m.per_client_test_acc[k] for m in trace.metrics if not math.isnan(m.per_client_test_acc[k])]
        vals = [m.per_client_val_acc[k] for m in trace.metrics]
        yield [k, fmt(client.data.labeled_ratio), client.data.n_labeled, client.data.n_unlabeled,
               fmt(vals[-1] if vals else math.nan), fmt(tests[-1] if tests else math.nan),
               fmt(max(tests) if tests else math.nan),
               ";".join(str(j) for j in client.helpers.ids())]


def format_summary(trace) -> str:
    """Plain-text table for standard output."""
    lines = [f"method={trace.method} ablation={trace.ablation} rounds={len(trace.metrics)}",
             f"{'round':>5} {'val':>7} {'test':>7} {'var':>8} {'pl_err':>7} {'up':>6} {'down':>6}"]
    for m in trace.metrics:
        lines.append(f"{m.round:>5} {m.mean_val_acc:7.4f} {m.mean_test_acc:7.4f} {m.acc_variance:8.5f} "
                     f"{m.pseudo_label_error:7.4f} {m.uploads:>6} {m.downloads:>6}")
    lines.append(f"best mean test accuracy: {best_accuracy(trace.metrics):.4f}")
    return "\n".join(lines)
