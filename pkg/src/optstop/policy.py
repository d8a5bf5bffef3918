"""Optimal stopping rules over a weighted prefix tree of observation sequences.

A deterministic stopping rule on a finite set of runs is a prefix-closed set
of observation prefixes after which the rule keeps going.  For a fixed rate
``r`` the rule maximizing ``q - r*c`` is a maximum-weight subtree, found
bottom-up in one pass; bisecting on ``r`` recovers the rule with the best
success-per-cost ratio.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .curves import SUCCESS, DiscretizedRun, QuantileDiscretizer, Token


ANY = -1
"""Pooled trie label standing for every observation without its own branch."""
_ROOT = -2


class SuccessUnreachable(ValueError):
    """No training run ever reaches the success token."""


@dataclass(frozen=True)
class PolicyStats:
    q: float
    c: float

    @property
    def ratio(self) -> float:
        return self.q / self.c

    @property
    def expected_time(self) -> float:
        return self.c / self.q if self.q > 0 else math.inf

    def to_json(self) -> dict:
        et = self.expected_time
        return {
            "q": self.q,
            "c": self.c,
            "ratio": self.ratio,
            "expected_time": et if math.isfinite(et) else "inf",
        }


@dataclass(frozen=True)
class TrieNode:
    label: Token | None
    mass: float
    step_cost: float
    count: int
    children: tuple[int, ...]

    @property
    def is_success(self) -> bool:
        return self.label == SUCCESS


class WeightedTrie:
    """Prefix tree over discretized runs, stored as flat arrays in BFS order.

    Node 0 is the root (empty prefix).  ``cost_mass[v]`` is the weighted sum of
    the runs' costs for the observation at ``v``, so ``step_cost = cost_mass /
    mass``.  ``count[v]`` is the number of runs through ``v``.
    """

    def __init__(self, parent, label, mass, cost_mass, count, run_count, min_count):
        self.parent = parent
        self.label = label
        self.mass = mass
        self.cost_mass = cost_mass
        self.count = count
        self.run_count = run_count
        self.min_count = min_count
        self.is_success = label == SUCCESS
        self.depth = np.zeros(len(parent), dtype=np.int64)
        for v in range(1, len(parent)):
            self.depth[v] = self.depth[parent[v]] + 1
        self.levels = [np.flatnonzero(self.depth == d) for d in range(int(self.depth.max()) + 1)]
        self._index = None
        self._plain = None

    def __len__(self) -> int:
        return len(self.parent)

    @property
    def total_success_mass(self) -> float:
        return float(self.mass[self.is_success].sum())

    @property
    def step_cost(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.mass > 0, self.cost_mass / self.mass, 0.0)

    def prefix(self, v: int) -> tuple[Token, ...]:
        out = []
        while v > 0:
            out.append(int(self.label[v]))
            v = int(self.parent[v])
        return tuple(reversed(out))

    def children(self, v: int) -> tuple[int, ...]:
        return tuple(int(x) for x in np.flatnonzero(self.parent == v))

    def node(self, v: int) -> TrieNode:
        return TrieNode(
            None if v == 0 else int(self.label[v]),
            float(self.mass[v]),
            float(self.step_cost[v]),
            int(self.count[v]),
            self.children(v),
        )

    def _lists(self):
        if self._plain is None:
            self._plain = (
                self.parent.tolist(),
                self.is_success.tolist(),
                self.mass.tolist(),
                self.cost_mass.tolist(),
            )
        return self._plain

    def find(self, prefix: Sequence[Token]) -> int | None:
        if self._index is None:
            self._index = {self.prefix(v): v for v in range(len(self))}
        return self._index.get(tuple(prefix))


def build_trie(
    runs: Sequence[DiscretizedRun], weights: Sequence[float] | None = None, min_count: int = 1
) -> WeightedTrie:
    """Merge runs into a weighted prefix tree (uniform weights by default).

    At each node, observations followed by fewer than ``min_count`` runs are
    pooled into a single ``ANY`` child, so every labelled branch is backed by
    at least ``min_count`` runs.  Success observations are never pooled.
    """
    k = len(runs)
    if k == 0:
        raise ValueError("no runs to build a trie from")
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    if weights is None:
        w = [1.0 / k] * k
    else:
        w = [float(x) for x in weights]
        if len(w) != k:
            raise ValueError(f"{len(w)} weights for {k} runs")
        if any(x <= 0 for x in w):
            raise ValueError("weights must be positive")
        if abs(math.fsum(w) - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {math.fsum(w)}, not 1")

    parent, label, mass, cost_mass, count = [-1], [_ROOT], [1.0], [0.0], [k]
    queue = [(0, list(range(k)), 0)]
    head = 0
    while head < len(queue):
        v, members, depth = queue[head]
        head += 1
        groups: dict[int, list[int]] = {}
        for i in members:
            if len(runs[i].tokens) > depth:
                groups.setdefault(runs[i].tokens[depth], []).append(i)
        pooled = []
        kids = []
        for tok in sorted(groups):
            g = groups[tok]
            if tok == SUCCESS or len(g) >= min_count:
                kids.append((tok, g))
            else:
                pooled.extend(g)
        if pooled:
            kids.append((ANY, sorted(pooled)))
        for tok, g in kids:
            u = len(parent)
            parent.append(v)
            label.append(tok)
            mass.append(math.fsum(w[i] for i in g))
            cost_mass.append(math.fsum(w[i] * runs[i].costs[depth] for i in g))
            count.append(len(g))
            if tok != SUCCESS:
                queue.append((u, g, depth + 1))
    return WeightedTrie(
        parent=np.array(parent, dtype=np.int64),
        label=np.array(label, dtype=np.int64),
        mass=np.array(mass),
        cost_mass=np.array(cost_mass),
        count=np.array(count, dtype=np.int64),
        run_count=k,
        min_count=min_count,
    )


class StoppingTree:
    """Deterministic stopping rule as a prefix-closed continue set.

    ``stop_prefixes`` lists the known prefixes where the rule stops; anything
    in neither set is unseen and handled by ``unseen_action``.  A prefix entry
    ``ANY`` matches any observation that has no entry of its own.
    """

    def __init__(
        self,
        continue_prefixes: Iterable[Sequence[Token]],
        stop_prefixes: Iterable[Sequence[Token]] = (),
        unseen_action: str = "stop",
    ):
        if unseen_action not in ("stop", "continue"):
            raise ValueError(f"unseen_action must be 'stop' or 'continue', got {unseen_action!r}")
        cont = {tuple(int(t) for t in p) for p in continue_prefixes}
        cont.add(())
        stop = {tuple(int(t) for t in p) for p in stop_prefixes} - cont
        for p in cont:
            if SUCCESS in p:
                raise ValueError(f"continue prefix {p} contains the success token")
            if p and p[:-1] not in cont:
                raise ValueError(f"continue set is not prefix-closed at {p}")
        self.continue_set = frozenset(cont)
        self.stop_set = frozenset(stop)
        self.unseen_action = unseen_action
        # walkable form: node 0 is the empty prefix
        self._kids: list[dict[int, int]] = [{}]
        self._cont: list[bool] = [True]
        ids = {(): 0}
        for p in sorted(cont | stop, key=len):
            if not p or p[:-1] not in ids:
                continue
            ids[p] = len(self._cont)
            self._kids[ids[p[:-1]]][p[-1]] = ids[p]
            self._kids.append({})
            self._cont.append(p in cont)

    def __len__(self) -> int:
        return len(self.continue_set)

    def __eq__(self, other):
        return (
            isinstance(other, StoppingTree)
            and self.continue_set == other.continue_set
            and self.unseen_action == other.unseen_action
        )

    def __hash__(self):
        return hash((self.continue_set, self.unseen_action))

    def __repr__(self):
        return f"StoppingTree({sorted(self.continue_set)}, unseen={self.unseen_action!r})"

    def continues(self, prefix: Sequence[Token]) -> bool:
        """Decision after observing ``prefix``."""
        cur = self.cursor()
        go = True
        for tok in prefix:
            go = cur.advance(tok)
        return go

    def cursor(self) -> "_TreeCursor":
        return _TreeCursor(self)

    def to_json(self) -> dict:
        return {
            "unseen_action": self.unseen_action,
            "continue_prefixes": [_enc_prefix(p) for p in sorted(self.continue_set, key=_sort_key)],
            "stop_prefixes": [_enc_prefix(p) for p in sorted(self.stop_set, key=_sort_key)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StoppingTree":
        return cls(
            [_dec_prefix(p) for p in obj["continue_prefixes"]],
            [_dec_prefix(p) for p in obj.get("stop_prefixes", [])],
            obj.get("unseen_action", "stop"),
        )


def _sort_key(p):
    return (len(p), p)


_ENC = {SUCCESS: "S", ANY: "*"}
_DEC = {"S": SUCCESS, "*": ANY}


def _enc_prefix(p):
    return [_ENC.get(t, t) for t in p]


def _dec_prefix(p):
    return tuple(_DEC[t] if isinstance(t, str) else int(t) for t in p)


class _TreeCursor:
    __slots__ = ("_tree", "_node", "_off")

    def __init__(self, tree: StoppingTree):
        self._tree = tree
        self._node = 0
        self._off = False

    def advance(self, token: Token) -> bool:
        """Feed the next observation; True means make another observation."""
        if token == SUCCESS:
            return False
        if not self._off:
            kids = self._tree._kids[self._node]
            nxt = kids.get(token)
            if nxt is None:
                nxt = kids.get(ANY)
            if nxt is not None:
                self._node = nxt
                return self._tree._cont[nxt]
            self._off = True
        return self._tree.unseen_action == "continue"


class FixedThresholdRule:
    """Label-oblivious rule: stop after ``t`` observations (``None`` = never)."""

    def __init__(self, t: int | None):
        if t is not None and t < 1:
            raise ValueError(f"threshold must be >= 1, got {t}")
        self.t = t

    def __repr__(self):
        return f"FixedThresholdRule({self.t})"

    def continues(self, prefix: Sequence) -> bool:
        if prefix and prefix[-1] == SUCCESS:
            return False
        return self.t is None or len(prefix) < self.t

    def cursor(self) -> "_CountCursor":
        return _CountCursor(self.t)


class _CountCursor:
    __slots__ = ("_left",)

    def __init__(self, t):
        self._left = math.inf if t is None else t

    def advance(self, obs) -> bool:
        self._left -= 1
        return self._left > 0


def fixed_threshold_rule(t: int | None) -> FixedThresholdRule:
    return FixedThresholdRule(t)


# -- evaluation -------------------------------------------------------------


def playout(rule, run: DiscretizedRun) -> tuple[float, bool]:
    """Cost paid and success of one run of ``rule`` on a discretized run."""
    cur = rule.cursor()
    cost = 0.0
    for tok, c in zip(run.tokens, run.costs):
        cost += c
        if tok == SUCCESS:
            return cost, True
        if not cur.advance(tok):
            return cost, False
    return cost, False


def evaluate_rule(rule, runs: Sequence[DiscretizedRun], weights: Sequence[float] | None = None) -> PolicyStats:
    """Success probability and expected cost of ``rule`` on weighted runs."""
    if not runs:
        raise ValueError("no runs to evaluate on")
    if weights is None:
        outcomes = [playout(rule, run) for run in runs]
        k = len(runs)
        return PolicyStats(sum(ok for _, ok in outcomes) / k, math.fsum(c for c, _ in outcomes) / k)
    qs, cs = [], []
    for run, w in zip(runs, weights):
        cost, ok = playout(rule, run)
        cs.append(w * cost)
        if ok:
            qs.append(w)
    return PolicyStats(math.fsum(qs), math.fsum(cs))


def _delta_core(trie: WeightedTrie, r: float) -> tuple[float, np.ndarray]:
    """Value of Delta(r) and the membership mask of its minimal maximizer."""
    parent, succ, mass, cost = trie._lists()
    n = len(parent)
    child_sum = [0.0] * n
    # BFS order puts every child after its parent, so one reverse sweep is bottom-up
    for v in range(n - 1, 0, -1):
        s = child_sum[v]
        f = (mass[v] if succ[v] else 0.0) - r * cost[v] + (s if s > 0.0 else 0.0)
        child_sum[parent[v]] += f
    member = [False] * n
    member[0] = True
    for v in range(1, n):
        # ties at exactly 0 stop
        member[v] = member[parent[v]] and child_sum[v] > 0.0 and not succ[v]
    return child_sum[0], np.array(member, dtype=bool)


def _tree_from_mask(trie: WeightedTrie, member: np.ndarray, unseen_action: str = "stop") -> StoppingTree:
    cont = [trie.prefix(v) for v in np.flatnonzero(member)]
    frontier = np.flatnonzero(~member & ~trie.is_success & member[np.maximum(trie.parent, 0)])
    stop = [trie.prefix(v) for v in frontier if v != 0]
    return StoppingTree(cont, stop, unseen_action)


def _stats_from_mask(trie: WeightedTrie, member: np.ndarray) -> PolicyStats:
    observed = member[np.maximum(trie.parent, 0)]
    observed[0] = False
    q = math.fsum(trie.mass[observed & trie.is_success])
    c = math.fsum(trie.cost_mass[observed])
    return PolicyStats(q, c)


def delta(trie: WeightedTrie, r: float) -> tuple[float, StoppingTree]:
    """``max_tau q(tau) - r*c(tau)`` and the smallest rule attaining it."""
    if r < 0:
        raise ValueError(f"r must be >= 0, got {r}")
    value, member = _delta_core(trie, r)
    return value, _tree_from_mask(trie, member)


def rule_stats_on_trie(trie: WeightedTrie, tree: StoppingTree) -> PolicyStats:
    member = np.array([tree.continues(trie.prefix(v)) or v == 0 for v in range(len(trie))])
    # membership must also be prefix-closed along the trie
    for level in trie.levels[1:]:
        member[level] &= member[trie.parent[level]]
    return _stats_from_mask(trie, member)


def find_stopping_rule(
    trie: WeightedTrie, epsilon: float, refine: bool = False, unseen_action: str = "stop"
) -> tuple[StoppingTree, PolicyStats, int]:
    """Bisection on the success/cost ratio.

    Keeps ``L < r* <= U`` and stops once ``U <= (1+epsilon) L``; the rule
    maximizing ``q - L*c`` then has ratio at least ``r*/(1+epsilon)``.  With
    ``refine`` the result is further improved by ratio iteration until no rule
    beats its own ratio, which lands on ``r*`` exactly.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if trie.total_success_mass <= 0:
        raise SuccessUnreachable("success unreachable: no run reaches the target")
    first = trie.levels[1] if len(trie.levels) > 1 else np.array([], dtype=np.int64)
    min_cost = float(trie.step_cost[first].min()) if len(first) else 1.0
    lo, hi = 0.0, max(1.0, 1.0 / min_cost)
    iterations = 0
    while hi > (1 + epsilon) * lo:
        r = (hi + lo) / 2
        value, _ = _delta_core(trie, r)
        if value > 0:
            lo = r
        else:
            hi = r
        iterations += 1
    _, member = _delta_core(trie, lo)
    stats = _stats_from_mask(trie, member)
    if refine:
        while True:
            value, cand = _delta_core(trie, stats.ratio)
            cand_stats = _stats_from_mask(trie, cand)
            if value <= 0 or not cand_stats.ratio > stats.ratio:
                break
            member, stats = cand, cand_stats
            iterations += 1
    return _tree_from_mask(trie, member, unseen_action), stats, iterations


# -- brute-force oracle -----------------------------------------------------


def brute_force_optimal(
    runs: Sequence[DiscretizedRun], node_limit: int = 20, weights: Sequence[float] | None = None
) -> tuple[float, StoppingTree]:
    """Exact best ratio by enumerating every prefix-closed continue set.

    Independent of the trie/DP code: prefixes come straight from the runs and
    each candidate is scored by direct playout in exact rational arithmetic.
    Ties go to the smaller set, then the lexicographically smaller one.
    """
    k = len(runs)
    if k == 0:
        raise ValueError("no runs")
    wts = [Fraction(1, k)] * k if weights is None else [Fraction(x) for x in weights]
    nodes = {tuple(r.tokens[:d]) for r in runs for d in range(1, len(r.tokens) + 1)}
    if len(nodes) > node_limit:
        raise ValueError(f"trie has {len(nodes)} nodes, over the limit of {node_limit}")
    # prefixes after which some run still has an observation to make
    expandable = {
        tuple(r.tokens[:d]) for r in runs for d in range(0, len(r.tokens))
        if not (d and r.tokens[d - 1] == SUCCESS)
    }
    kids: dict[tuple, list[tuple]] = {}
    for p in sorted(expandable, key=_sort_key):
        if p:
            kids.setdefault(p[:-1], []).append(p)

    def options(p):
        # every continue set of the subtree rooted at p, given p continues
        per_kid = [[frozenset()] + options(kid) for kid in kids.get(p, [])]
        return [frozenset([p]).union(*combo) for combo in itertools.product(*per_kid)]

    exact_runs = [(r.tokens, [Fraction(c) for c in r.costs]) for r in runs]
    best = None
    for cset in options(()):
        q = c = Fraction(0)
        for (tokens, costs), w in zip(exact_runs, wts):
            for d, (tok, cost) in enumerate(zip(tokens, costs), 1):
                c += w * cost
                if tok == SUCCESS:
                    q += w
                    break
                if tokens[:d] not in cset:
                    break
        ratio = q / c
        key = (-ratio, len(cset), sorted(cset, key=_sort_key))
        if best is None or key < best[0]:
            best = (key, ratio, cset)
    _, ratio, cset = best
    return float(ratio), StoppingTree(cset)


# -- fitted rule (discretizer + tree) ---------------------------------------


@dataclass
class FittedRule:
    """A stopping tree bound to the discretizer that produces its tokens."""

    tree: StoppingTree
    discretizer: QuantileDiscretizer
    stats: PolicyStats | None = None

    def cursor(self) -> "_FittedCursor":
        return _FittedCursor(self)

    def to_json(self) -> dict:
        out = self.tree.to_json()
        out["discretizer"] = self.discretizer.to_json()
        if self.stats is not None:
            out["stats"] = self.stats.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FittedRule":
        stats = None
        if "stats" in obj:
            stats = PolicyStats(float(obj["stats"]["q"]), float(obj["stats"]["c"]))
        return cls(StoppingTree.from_json(obj), QuantileDiscretizer.from_json(obj["discretizer"]), stats)


class _FittedCursor:
    __slots__ = ("_walk", "_tree")

    def __init__(self, rule: FittedRule):
        self._walk = rule.discretizer.walker()
        self._tree = rule.tree.cursor()

    def advance(self, value: float) -> bool:
        return self._tree.advance(self._walk.step(value))
