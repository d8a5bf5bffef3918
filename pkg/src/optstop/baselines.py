"""Reference policies: restart schedules, above-median, Successive Halving, Hyperband."""
from __future__ import annotations

import math
from typing import Iterator, Sequence

from .curves import CurveDataset, SuccessSpec, success_time
from .policy import PolicyStats
from .simulator import RunSwitchingPolicy, TrialView


def luby_length(i: int) -> int:
    """i-th term (1-based) of the Luby sequence 1,1,2,1,1,2,4,1,..."""
    if i < 1:
        raise ValueError(f"Luby index must be >= 1, got {i}")
    while True:
        k = i.bit_length()
        if i == (1 << k) - 1:
            return 1 << (k - 1)
        i -= (1 << (k - 1)) - 1


def luby_schedule() -> Iterator[int]:
    i = 1
    while True:
        yield luby_length(i)
        i += 1


class ScheduleRestartPolicy(RunSwitchingPolicy):
    """Fresh seed for every run; run ``j`` is cut off after ``lengths[j]`` steps."""

    def __init__(self, lengths: Iterator[int]):
        self._lengths = lengths
        self._seed = None
        self._limit = 0

    def choose(self, view: TrialView) -> int:
        i = self._seed
        if i is not None and not view.exhausted[i] and len(view.values[i]) < self._limit:
            return i
        self._seed = view.n_seeds
        self._limit = next(self._lengths)
        return self._seed


class LubyPolicy(ScheduleRestartPolicy):
    def __init__(self):
        super().__init__(luby_schedule())


class AboveMedianRule:
    """Stop after step t when the value is strictly below ``medians[t]``.

    Steps past the end of ``medians`` never trigger a stop.
    """

    def __init__(self, medians: Sequence[float]):
        if len(medians) == 0:
            raise ValueError("medians must be non-empty")
        self.medians = tuple(float(m) for m in medians)

    def cursor(self) -> "_MedianCursor":
        return _MedianCursor(self.medians)


class _MedianCursor:
    __slots__ = ("_medians", "_t")

    def __init__(self, medians):
        self._medians = medians
        self._t = 0

    def advance(self, value: float) -> bool:
        t = self._t
        self._t += 1
        return t >= len(self._medians) or not value < self._medians[t]


def above_median_rule(medians: Sequence[float]) -> AboveMedianRule:
    return AboveMedianRule(medians)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _ceil_log(n: int, eta: int) -> int:
    s = 0
    while eta**s < n:
        s += 1
    return s


def _floor_log(R: int, eta: int) -> int:
    s = 0
    while eta ** (s + 1) <= R:
        s += 1
    return s


def rung_budgets(R: int, eta: int, s: int) -> list[int]:
    """Per-rung step budgets ``R * eta**(i - s)``, floored, at least 1, ending at R."""
    return [max(1, R * eta**i // eta**s) for i in range(s + 1)]


class SuccessiveHalvingPolicy(RunSwitchingPolicy):
    """Successive Halving over fresh seeds, repeated bracket after bracket.

    Each bracket starts ``n`` seeds, advances every survivor to the rung budget
    (in seed order), then keeps the ``ceil(m/eta)`` with the highest current
    value, ties to the lower seed index.  A seed whose curve ends early keeps
    its last value.  ``brackets`` yields ``(n, budgets)`` pairs.
    """

    def __init__(self, brackets: Iterator[tuple[int, list[int]]], eta: int):
        self._brackets = brackets
        self.eta = eta
        self._configs: list[int | None] = []
        self._budgets: list[int] = []
        self._rung = 0
        self._pos = 0

    def _next_bracket(self):
        n, budgets = next(self._brackets)
        self._configs = [None] * n
        self._budgets = budgets
        self._rung = 0
        self._pos = 0

    def choose(self, view: TrialView) -> int:
        while True:
            if not self._configs:
                self._next_bracket()
            budget = self._budgets[self._rung]
            while self._pos < len(self._configs):
                seed = self._configs[self._pos]
                if seed is None:
                    self._configs[self._pos] = view.n_seeds
                    return view.n_seeds
                if not view.exhausted[seed] and len(view.values[seed]) < budget:
                    return seed
                self._pos += 1
            if self._rung + 1 == len(self._budgets):
                self._configs = []
                continue
            keep = _ceil_div(len(self._configs), self.eta)
            ranked = sorted(self._configs, key=lambda s: (-view.values[s][-1], s))
            self._configs = sorted(ranked[:keep])
            self._rung += 1
            self._pos = 0


def _repeat(bracket):
    while True:
        yield bracket


def successive_halving(n: int, eta: int, R: int) -> SuccessiveHalvingPolicy:
    if n < 1 or R < 1 or eta < 2:
        raise ValueError(f"need n >= 1, R >= 1, eta >= 2; got n={n}, eta={eta}, R={R}")
    s = _ceil_log(n, eta)
    return SuccessiveHalvingPolicy(_repeat((n, rung_budgets(R, eta, s))), eta)


def hyperband_brackets(R: int, eta: int) -> list[tuple[int, list[int]]]:
    """One Hyperband cycle: brackets s = s_max..0 as ``(n_s, budgets)``."""
    s_max = _floor_log(R, eta)
    return [
        (_ceil_div((s_max + 1) * eta**s, s + 1), rung_budgets(R, eta, s))
        for s in range(s_max, -1, -1)
    ]


def _cycle(brackets):
    while True:
        yield from brackets


def hyperband(R: int, eta: int = 3) -> SuccessiveHalvingPolicy:
    if R < 1 or eta < 2:
        raise ValueError(f"need R >= 1 and eta >= 2; got R={R}, eta={eta}")
    return SuccessiveHalvingPolicy(_cycle(hyperband_brackets(R, eta)), eta)


class SuccessiveHalvingFactory:
    """Picklable factory for simulator trials."""

    def __init__(self, n: int, eta: int, R: int):
        successive_halving(n, eta, R)
        self.n, self.eta, self.R = n, eta, R

    def __call__(self):
        return successive_halving(self.n, self.eta, self.R)


class HyperbandFactory:
    def __init__(self, R: int, eta: int = 3):
        hyperband(R, eta)
        self.R, self.eta = R, eta

    def __call__(self):
        return hyperband(self.R, self.eta)


def threshold_sweep(
    dataset: CurveDataset, spec: SuccessSpec, t_values: Sequence[int]
) -> list[tuple[int, PolicyStats]]:
    """Exact (q, c) of restarting every ``t`` steps, for each ``t``."""
    horizon = dataset.horizon
    hits = [success_time(c, spec) for c in dataset]
    prefix_costs = []
    for c in dataset:
        acc, run = [0.0], 0.0
        for j in range(len(c)):
            run += c.cost(j)
            acc.append(run)
        prefix_costs.append(acc)
    k = len(dataset)
    out = []
    for t in t_values:
        if not 1 <= t <= horizon:
            raise ValueError(f"threshold {t} outside 1..{horizon}")
        q = sum(1 for h in hits if h is not None and h <= t) / k
        cs = []
        for c, h, acc in zip(dataset, hits, prefix_costs):
            stop = min(t, len(c)) if h is None else min(t, h)
            cs.append(acc[stop])
        out.append((t, PolicyStats(q, math.fsum(cs) / k)))
    return out
