"""Trace simulation of run-switching policies over a curve dataset.

Each trial draws curves uniformly with replacement (one draw per fresh seed)
from its own RNG stream, derived from ``(master_seed, trial)``, so results do
not depend on how trials are spread over worker processes.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .curves import Curve, CurveDataset, DiscretizedRun, SuccessSpec
from .policy import PolicyStats, evaluate_rule

class TrialView:
    """What a policy sees: per-seed observed values and which seeds ran out.

    ``values[i]`` is the list of observations made so far on seed ``i`` and
    ``spent[i]`` their total cost.  A seed is exhausted once its curve has no
    further steps.
    """

    __slots__ = ("values", "spent", "exhausted")

    def __init__(self):
        self.values: list[list[float]] = []
        self.spent: list[float] = []
        self.exhausted: list[bool] = []

    @property
    def n_seeds(self) -> int:
        return len(self.values)


class RunSwitchingPolicy:
    """Chooses which seed to advance next.

    ``choose`` returns an index into ``view.values``; returning
    ``view.n_seeds`` asks for a freshly sampled seed.
    """

    def choose(self, view: TrialView) -> int:
        raise NotImplementedError


class StaticRestartPolicy(RunSwitchingPolicy):
    """Run ``rule`` on a fresh seed until it stops, then start over.

    ``rule.cursor()`` must return an object whose ``advance(value)`` says
    whether to make another observation.
    """

    def __init__(self, rule):
        self.rule = rule
        self._seed = None
        self._cursor = None
        self._fed = 0

    def choose(self, view: TrialView) -> int:
        i = self._seed
        if i is not None and not view.exhausted[i]:
            vals = view.values[i]
            if len(vals) > self._fed:
                self._fed = len(vals)
                self._go = self._cursor.advance(vals[-1])
            if self._go:
                return i
        self._seed = view.n_seeds
        self._cursor = self.rule.cursor()
        self._fed = 0
        self._go = True
        return self._seed


@dataclass(frozen=True)
class SimResult:
    mean_time: float
    std_error: float
    trials: int
    censored: int

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "mean_time": _num(self.mean_time),
            "std_error": _num(self.std_error),
            "censored": self.censored,
        }


def _num(x: float):
    return x if math.isfinite(x) else "inf"


_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    # splitmix64 finalizer
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class _SeedSampler:
    """Uniform curve indices from a counter-based stream keyed by ``(master_seed, trial)``.

    Draw ``j`` depends only on the key and ``j``, so trials are independent of
    how they are split across processes and cheap to set up.
    """

    __slots__ = ("_key", "_n", "_j")

    def __init__(self, master_seed: int, trial: int, n: int):
        base = _mix64(master_seed & _MASK)
        self._key = _mix64((base + trial * _GOLDEN) & _MASK)
        self._n = n
        self._j = 0

    def draw(self) -> int:
        self._j += 1
        x = _mix64((self._key + self._j * _GOLDEN) & _MASK)
        return (x * self._n) >> 64


def _generic_trial(policy, curves, target, cap, sampler) -> tuple[float, bool]:
    view = TrialView()
    values, spent, exhausted = view.values, view.spent, view.exhausted
    which: list[Curve] = []
    total = 0.0
    while True:
        i = policy.choose(view)
        if i == len(values):
            which.append(curves[sampler.draw()])
            values.append([])
            spent.append(0.0)
            exhausted.append(False)
        elif not 0 <= i < len(values):
            raise RuntimeError(f"policy chose seed {i} with only {len(values)} seeds in use")
        elif exhausted[i]:
            raise RuntimeError(f"policy chose exhausted seed {i}")
        curve = which[i]
        pos = len(values[i])
        v = curve.values[pos]
        values[i].append(v)
        c = curve.cost(pos)
        spent[i] += c
        total += c
        if v >= target:
            return total, False
        if pos + 1 == len(curve):
            exhausted[i] = True
        if total >= cap:
            return math.nan, True


def raw_playout(rule, curve: Curve, target: float) -> tuple[int, bool]:
    """Observations made and success for one run of ``rule`` on a raw curve."""
    cur = rule.cursor()
    for t, v in enumerate(curve.values, 1):
        if v >= target:
            return t, True
        if not cur.advance(v):
            return t, False
    return len(curve), False


def _outcome_table(rule, curves, target):
    table = []
    for curve in curves:
        steps, ok = raw_playout(rule, curve, target)
        costs = None if curve.costs is None else curve.costs[:steps]
        table.append((steps, ok, costs))
    return table


def _fast_trial(table, cap, sampler) -> tuple[float, bool]:
    # same draws and float accumulation order as the generic path
    total = 0.0
    while True:
        steps, ok, costs = table[sampler.draw()]
        if costs is None:
            if ok:
                if steps > 1 and total + (steps - 1) >= cap:
                    return math.nan, True
                return total + steps, False
            total += steps
            if total >= cap:
                return math.nan, True
        else:
            for j, c in enumerate(costs):
                total += c
                if ok and j == steps - 1:
                    return total, False
                if total >= cap:
                    return math.nan, True


def _run_chunk(args) -> list[tuple[float, bool]]:
    factory, curves, target, cap, master_seed, start, stop, fast = args
    n = len(curves)
    out = []
    table = None
    if fast:
        probe = factory()
        if isinstance(probe, StaticRestartPolicy):
            table = _outcome_table(probe.rule, curves, target)
    if table is not None and not any(ok for _, ok, _ in table):
        # no curve can succeed: every trial runs into the cap whatever it draws
        return [(math.nan, True)] * (stop - start)
    for trial in range(start, stop):
        sampler = _SeedSampler(master_seed, trial, n)
        if table is not None:
            out.append(_fast_trial(table, cap, sampler))
        else:
            out.append(_generic_trial(factory(), curves, target, cap, sampler))
    return out


def simulate_time_to_success(
    policy_factory: Callable[[], RunSwitchingPolicy],
    dataset: CurveDataset,
    spec: SuccessSpec,
    trials: int,
    cap: float | None = None,
    master_seed: int = 0,
    workers: int = 1,
    fast: bool = True,
) -> SimResult:
    """Monte Carlo time-to-success of a policy, one fresh instance per trial.

    ``cap`` (default ``1000 * horizon``) bounds the cost of a trial; capped
    trials are counted as censored and left out of the mean.  Static restart
    policies take a precomputed per-curve shortcut unless ``fast`` is off; the
    result is identical either way.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if cap is None:
        cap = 1000 * dataset.horizon
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    curves = dataset.curves
    workers = max(1, min(workers, trials))
    bounds = np.linspace(0, trials, workers + 1).astype(int)
    jobs = [
        (policy_factory, curves, spec.target, cap, master_seed, int(a), int(b), fast)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]
    if workers == 1:
        results = _run_chunk(jobs[0])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for chunk in pool.map(_run_chunk, jobs) for r in chunk]
    return summarize([t for t, censored in results if not censored], trials)


def summarize(times: Sequence[float], trials: int) -> SimResult:
    n = len(times)
    if n == 0:
        return SimResult(math.inf, math.inf, trials, trials)
    mean = math.fsum(times) / n
    if n > 1:
        var = math.fsum((x - mean) ** 2 for x in times) / (n - 1)
        se = math.sqrt(var / n)
    else:
        se = 0.0
    return SimResult(mean, se, trials, trials - n)


def restart_stats(rule, data, spec: SuccessSpec | None = None) -> PolicyStats:
    """Per-run (q, c) of ``rule`` under the empirical distribution of ``data``.

    ``data`` is either discretized runs (token rules) or a curve dataset, in
    which case the rule is played on raw values against ``spec``.
    """
    if isinstance(data, CurveDataset):
        if spec is None:
            raise ValueError("a success spec is needed to play a rule on raw curves")
        k = len(data)
        qs, cs = [], []
        for curve in data:
            steps, ok = raw_playout(rule, curve, spec.target)
            cs.append(float(steps) if curve.costs is None else sum(curve.costs[:steps]))
            if ok:
                qs.append(1)
        return PolicyStats(sum(qs) / k, math.fsum(cs) / k)
    runs: Sequence[DiscretizedRun] = data
    return evaluate_rule(rule, runs)


def exact_restart_expectation(rule, data, spec: SuccessSpec | None = None) -> float:
    """Expected time-to-success ``c/q`` of restarting ``rule`` forever."""
    return restart_stats(rule, data, spec).expected_time
