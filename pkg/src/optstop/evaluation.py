"""Cross-validated policy assessment and the online explore/exploit algorithms."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .baselines import AboveMedianRule
from .curves import (
    SUCCESS,
    Curve,
    CurveDataset,
    SuccessSpec,
    discretize_all,
    fit_discretizer,
    percentile_target,
    population_medians,
)
from .policy import (
    FittedRule,
    FixedThresholdRule,
    SuccessUnreachable,
    build_trie,
    evaluate_rule,
    find_stopping_rule,
)
from .simulator import RunSwitchingPolicy, TrialView, exact_restart_expectation, restart_stats

log = logging.getLogger(__name__)


def fit_quantile_policy(
    dataset: CurveDataset,
    spec: SuccessSpec,
    K: int,
    min_count: int = 4,
    epsilon: float = 0.01,
    refine: bool = True,
) -> FittedRule:
    """Discretize, build the pruned trie, and search for the best stopping rule."""
    disc = fit_discretizer(dataset, spec, K, min_count)
    trie = build_trie(discretize_all(disc, dataset), min_count=min_count)
    tree, stats, _ = find_stopping_rule(trie, epsilon, refine=refine)
    return FittedRule(tree, disc, stats)


@dataclass
class CvEstimate:
    per_fold: list[tuple[float, float]]
    fallback_folds: list[int] = field(default_factory=list)

    @property
    def low_variance(self) -> float:
        q = math.fsum(q for q, _ in self.per_fold)
        c = math.fsum(c for _, c in self.per_fold)
        return c / q if q > 0 else math.inf

    @property
    def naive(self) -> float:
        if any(q == 0 for q, _ in self.per_fold):
            return math.inf
        return math.fsum(c / q for q, c in self.per_fold) / len(self.per_fold)

    def to_json(self) -> dict:
        return {
            "low_variance": _num(self.low_variance),
            "naive": _num(self.naive),
            "folds": [{"q": q, "c": c} for q, c in self.per_fold],
            "fallback_folds": list(self.fallback_folds),
        }


def _num(x):
    return x if math.isfinite(x) else "inf"


def cv_estimate(per_fold: Sequence[tuple[float, float]]) -> CvEstimate:
    """Estimator pair from per-fold ``(q_i, c_i)``."""
    return CvEstimate([(float(q), float(c)) for q, c in per_fold])


def fold_partition(n: int, folds: int, fold_seed: int) -> list[np.ndarray]:
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if folds > n:
        raise ValueError(f"{folds} folds for {n} curves leaves a fold empty")
    perm = np.random.default_rng(fold_seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def kfold_cv(
    dataset: CurveDataset,
    spec: SuccessSpec,
    K: int,
    folds: int,
    min_count: int = 4,
    epsilon: float = 0.01,
    fold_seed: int = 0,
    refine: bool = True,
) -> CvEstimate:
    """Fit on all folds but one, measure (q, c) on the held-out fold.

    A training split where nothing succeeds falls back to running every curve
    to the horizon; such folds are listed in ``fallback_folds``.
    """
    parts = fold_partition(len(dataset), folds, fold_seed)
    per_fold, fallback = [], []
    for i, test_idx in enumerate(parts):
        train_idx = np.concatenate([p for j, p in enumerate(parts) if j != i])
        train, test = dataset.subset(train_idx), dataset.subset(test_idx)
        try:
            rule = fit_quantile_policy(train, spec, K, min_count, epsilon, refine)
            stats = evaluate_rule(rule.tree, discretize_all(rule.discretizer, test))
        except SuccessUnreachable:
            log.info("fold %d: no training curve reaches %s; using the full-horizon rule", i, spec.target)
            fallback.append(i)
            stats = restart_stats(FixedThresholdRule(dataset.horizon), test, spec)
        per_fold.append((stats.q, stats.c))
    return CvEstimate(per_fold, fallback)


@dataclass
class QuantileSelection:
    K_best: int
    rule: FittedRule
    estimate: CvEstimate
    per_K: dict[int, CvEstimate]


def select_best_quantile_policy(
    dataset: CurveDataset,
    spec: SuccessSpec,
    K_set: Sequence[int] = (2, 3, 4),
    folds: int = 5,
    min_count: int = 4,
    epsilon: float = 0.01,
    fold_seed: int = 0,
    refine: bool = True,
) -> QuantileSelection:
    """Pick the bucket count with the lowest cross-validated expected time."""
    per_K = {}
    for K in sorted(K_set):
        per_K[K] = kfold_cv(dataset, spec, K, folds, min_count, epsilon, fold_seed, refine)
    best = None
    for K, est in per_K.items():
        # ascending K, so strict improvement keeps the smaller K on ties
        if best is None or est.low_variance < per_K[best].low_variance and not math.isclose(
            est.low_variance, per_K[best].low_variance, rel_tol=1e-12
        ):
            best = K
    rule = fit_quantile_policy(dataset, spec, best, min_count, epsilon, refine)
    return QuantileSelection(best, rule, per_K[best], per_K)


def random_search_time(dataset: CurveDataset, spec: SuccessSpec) -> float:
    return exact_restart_expectation(FixedThresholdRule(None), dataset, spec)


def improvement_over_random(policy_eval: float, dataset: CurveDataset, spec: SuccessSpec) -> float:
    """Random search's expected time divided by ``policy_eval``."""
    base = random_search_time(dataset, spec)
    if not math.isfinite(base):
        raise SuccessUnreachable(f"random search never reaches target {spec.target}")
    return base / policy_eval


# -- online algorithms ------------------------------------------------------


@dataclass(frozen=True)
class ExploreExploitConfig:
    K_set: tuple[int, ...] = (2, 3, 4)
    folds: int = 5
    min_count: int = 4
    epsilon: float = 0.01
    refit_period: int = 8
    exploration_percentile: float = 90.0
    fold_seed: int = 0

    def validate(self):
        if self.refit_period < 1:
            raise ValueError("refit_period must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.K_set or min(self.K_set) < 1:
            raise ValueError("K_set must hold bucket counts >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not 0 <= self.exploration_percentile <= 100:
            raise ValueError("exploration_percentile must be in [0, 100]")


class _RideCursor:
    # an exploited run that hits the internal target is kept to the end
    __slots__ = ("_walk", "_tree", "_ride")

    def __init__(self, rule: FittedRule):
        self._walk = rule.discretizer.walker()
        self._tree = rule.tree.cursor()
        self._ride = False

    def advance(self, value: float) -> bool:
        if self._ride:
            return True
        tok = self._walk.step(value)
        if tok == SUCCESS:
            self._ride = True
            return True
        return self._tree.advance(tok)


class _TimeSplitPolicy(RunSwitchingPolicy):
    """Alternates full-length exploration runs with runs of a learned rule.

    A new run explores when cumulative exploration cost is at most the
    cumulative exploitation cost.  Completed exploration curves are kept and
    the rule is refit after every ``refit_period`` new ones.  Until the first
    fit, exploitation runs go to full length as well.
    """

    def __init__(self, config: ExploreExploitConfig):
        config.validate()
        self.config = config
        self.explore_cost = 0.0
        self.exploit_cost = 0.0
        self.curves: list[Curve] = []
        self.rule = None
        self.fits = 0
        self._new = 0
        self._seed = None
        self._exploring = True
        self._cursor = None
        self._fed = 0
        self._go = True

    def _fit(self, dataset: CurveDataset):
        raise NotImplementedError

    def _cursor_for(self, rule):
        return rule.cursor()

    def _finish(self, view: TrialView):
        i = self._seed
        if self._exploring:
            self.explore_cost += view.spent[i]
            if view.exhausted[i]:
                self.curves.append(Curve(f"e{len(self.curves)}", tuple(view.values[i])))
                self._new += 1
                if self._new >= self.config.refit_period:
                    self._new = 0
                    self._refit()
        else:
            self.exploit_cost += view.spent[i]

    def _refit(self):
        key = tuple(c.values for c in self.curves)
        rule = _cached_fit(type(self), self.config, key)
        if rule is not None:
            self.rule = rule
            self.fits += 1

    def choose(self, view: TrialView) -> int:
        i = self._seed
        if i is not None and not view.exhausted[i]:
            if self._cursor is None:
                return i
            vals = view.values[i]
            if len(vals) > self._fed:
                self._fed = len(vals)
                self._go = self._cursor.advance(vals[-1])
            if self._go:
                return i
        if i is not None:
            self._finish(view)
        self._exploring = self.explore_cost <= self.exploit_cost
        self._cursor = None if self._exploring or self.rule is None else self._cursor_for(self.rule)
        self._seed = view.n_seeds
        self._fed = 0
        self._go = True
        return self._seed


@lru_cache(maxsize=4096)
def _cached_fit(cls, config, values):
    # a fit depends only on the curve values, which repeat across trials
    dataset = CurveDataset(tuple(Curve(f"e{i}", v) for i, v in enumerate(values)))
    try:
        return cls._fit(cls(config), dataset)
    except (SuccessUnreachable, ValueError) as e:
        log.debug("refit skipped: %s", e)
        return None


class ExploreExploitPolicy(_TimeSplitPolicy):
    """Exploits the cross-validated best quantile policy for an internal target.

    The internal target is the configured percentile of final values seen
    during exploration.
    """

    def _fit(self, dataset):
        cfg = self.config
        spec = percentile_target(dataset, cfg.exploration_percentile)
        folds = min(cfg.folds, len(dataset))
        if folds < 2:
            return None
        sel = select_best_quantile_policy(
            dataset, spec, cfg.K_set, folds, cfg.min_count, cfg.epsilon, cfg.fold_seed
        )
        return sel.rule

    def _cursor_for(self, rule):
        return _RideCursor(rule)


class AboveMedianAlgorithm(_TimeSplitPolicy):
    """Exploits the above-median rule over medians of the exploration curves."""

    def _fit(self, dataset):
        return AboveMedianRule(population_medians(dataset))


def explore_exploit_policy(config: ExploreExploitConfig = ExploreExploitConfig()) -> ExploreExploitPolicy:
    return ExploreExploitPolicy(config)


def above_median_algorithm(config: ExploreExploitConfig = ExploreExploitConfig()) -> AboveMedianAlgorithm:
    return AboveMedianAlgorithm(config)
