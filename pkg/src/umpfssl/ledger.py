"""Model-transfer accounting and the analytic communication-cost model.

All costs are counted in model-units (one full parameter vector). The
analytic formulas return ``fractions.Fraction`` so they are exact for
rational inputs; floats are read through their decimal repr, so ``0.1``
means exactly 1/10.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import DomainError


def as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


def cost1(tau, K, n) -> Fraction:
    """Greedy search cost: sampled uploads plus downloads of every peer, ``tau K^2 n``."""
    tau, K, n = as_fraction(tau), as_fraction(K), as_fraction(n)
    if not 0 < tau <= 1 or K < 1 or n < 0:
        raise DomainError("need tau in (0, 1], K >= 1, n >= 0")
    return tau * K * n + tau * K * (K - 1) * n


def update_term(K, M, n, nu) -> Fraction:
    return as_fraction(K) * as_fraction(M) * as_fraction(n) / as_fraction(nu)


def search_term(F, R, K) -> Fraction:
    return as_fraction(F) * as_fraction(R) * as_fraction(K)


def upload_term(tau, K, n) -> Fraction:
    return as_fraction(tau) * as_fraction(K) * as_fraction(n)


def cost2_bound(K, M, n, nu, F, R, tau) -> Fraction:
    """Upper bound of helper-protocol traffic: ``K M n/nu + F R K + tau K n``."""
    if as_fraction(nu) <= 0:
        raise DomainError("update period nu must be positive")
    return update_term(K, M, n, nu) + search_term(F, R, K) + upload_term(tau, K, n)


def savings_delta(K, M, n, nu, F, R, tau) -> tuple[Fraction, Fraction]:
    """``(cost1 - cost2_bound, fraction of cost1 saved)``; the fraction is 0 when cost1 is 0."""
    c1 = cost1(tau, K, n)
    delta = c1 - cost2_bound(K, M, n, nu, F, R, tau)
    return delta, (delta / c1 if c1 else Fraction(0))


def effective_tau(tau, K) -> Fraction:
    """Sampling rate actually realized when ``ceil(tau K)`` clients train per round."""
    return Fraction(math.ceil(as_fraction(tau) * K), K)


@dataclass
class CostLedger:
    uploads: int = 0
    downloads: int = 0
    model_unit_bytes: int | None = None
    _rounds: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def _row(self, rnd: int) -> list[int]:
        return self._rounds.setdefault(rnd, [0, 0])

    def record_upload(self, rnd: int, units: int = 1) -> None:
        with self._lock:
            self.uploads += units
            self._row(rnd)[0] += units

    def record_download(self, rnd: int, units: int = 1) -> None:
        with self._lock:
            self.downloads += units
            self._row(rnd)[1] += units

    @property
    def total(self) -> int:
        return self.uploads + self.downloads

    @property
    def per_round(self) -> list[tuple[int, int, int]]:
        return [(r, u, d) for r, (u, d) in sorted(self._rounds.items())]

    def round_totals(self, rnd: int) -> tuple[int, int]:
        u, d = self._rounds.get(rnd, (0, 0))
        return u, d

    @property
    def initial_total(self) -> int:
        """Traffic of round 0: seeding the pool and filling helper lists."""
        return sum(self.round_totals(0))

    def check(self) -> list[str]:
        problems = []
        if self.uploads < 0 or self.downloads < 0:
            problems.append("negative ledger counter")
        su = sum(u for _, u, _ in self.per_round)
        sd = sum(d for _, _, d in self.per_round)
        if (su, sd) != (self.uploads, self.downloads):
            problems.append(f"per-round sums {(su, sd)} != totals {(self.uploads, self.downloads)}")
        return problems


@dataclass
class ReconcileReport:
    measured: int
    initial: int
    bound: Fraction
    worst_case: int
    trace_units: int
    trace_downloads: int
    ledger_downloads: int
    problems: list[str]

    @property
    def ok(self) -> bool:
        return not self.problems

    @property
    def slack(self) -> Fraction:
        return self.bound + self.initial - self.measured


def schedule_worst_case(K, M, n, nu, F, R, tau, restrict_to_sampled: bool = False) -> int:
    """Largest traffic the round loop can produce after round 0.

    Updates refresh at most the ``M - 1 - R`` retained peers (self is free),
    searches run on rounds ``1..F-1`` and ``ceil(tau K)`` clients upload per
    round. Always at most ``cost2_bound`` with ``tau`` replaced by its
    realized value.
    """
    sampled = math.ceil(as_fraction(tau) * K)
    active = sampled if restrict_to_sampled else K
    retained = max(0, M - 1 - min(R, M - 1))
    searches = max(0, min(n, F - 1))
    return active * retained * (n // nu) + active * R * searches + sampled * n


def reconcile(ledger: CostLedger, events, K, M, n, nu, F, R, tau) -> ReconcileReport:
    """Compare measured traffic against the analytic bound and the event trace."""
    bound = cost2_bound(K, M, n, nu, F, R, effective_tau(tau, K))
    measured = ledger.total
    initial = ledger.initial_total
    trace_units = sum(e.model_units for e in events)
    trace_down = sum(e.model_units for e in events if e.is_download)
    problems = ledger.check()
    if measured - initial > bound:
        problems.append(f"measured traffic {measured - initial} exceeds bound {bound}")
    if trace_units != measured:
        problems.append(f"trace model-units {trace_units} != ledger total {measured}")
    if trace_down != ledger.downloads:
        problems.append(f"trace downloads {trace_down} != ledger downloads {ledger.downloads}")
    return ReconcileReport(measured, initial, bound,
                           schedule_worst_case(K, M, n, nu, F, R, tau),
                           trace_units, trace_down, ledger.downloads, problems)
