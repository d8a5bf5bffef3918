"""Curve datasets, the success condition, and quantile discretization.

A curve is the sequence of values produced by running one sampled seed.  The
policy machinery works on a finite observation alphabet, so raw curves are
mapped to tokens: an integer bucket ``1..K`` for ordinary observations and
``SUCCESS`` (0) once the value reaches the target.
"""
from __future__ import annotations

import csv
import json
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SUCCESS = 0
"""Token for the terminal success observation.  Buckets are 1..K."""

Token = int


class CurveDataError(ValueError):
    """Malformed curve input.  ``line`` is the 1-based offending line, if known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Curve:
    id: str
    values: tuple[float, ...]
    costs: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) < 1:
            raise CurveDataError(f"curve {self.id!r} is empty")
        if not all(math.isfinite(v) for v in self.values):
            raise CurveDataError(f"curve {self.id!r} has a non-finite value")
        if self.costs is not None:
            object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
            if len(self.costs) != len(self.values):
                raise CurveDataError(
                    f"curve {self.id!r}: {len(self.costs)} costs for {len(self.values)} values"
                )
            if not all(math.isfinite(c) and c > 0 for c in self.costs):
                raise CurveDataError(f"curve {self.id!r} has a non-positive cost")

    def __len__(self) -> int:
        return len(self.values)

    def cost(self, t: int) -> float:
        """Cost of the observation at 0-based step ``t``."""
        return 1.0 if self.costs is None else self.costs[t]


@dataclass(frozen=True)
class CurveDataset:
    curves: tuple[Curve, ...]

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))
        if not self.curves:
            raise CurveDataError("dataset has no curves")
        seen = set()
        for c in self.curves:
            if c.id in seen:
                raise CurveDataError(f"duplicate curve id {c.id!r}")
            seen.add(c.id)

    @property
    def horizon(self) -> int:
        return max(len(c) for c in self.curves)

    def __len__(self) -> int:
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def __getitem__(self, i):
        return self.curves[i]

    def subset(self, indices: Iterable[int]) -> "CurveDataset":
        return CurveDataset(tuple(self.curves[i] for i in indices))

    def final_values(self) -> np.ndarray:
        return np.array([c.values[-1] for c in self.curves])


@dataclass(frozen=True)
class SuccessSpec:
    target: float

    def __post_init__(self):
        if not math.isfinite(self.target):
            raise ValueError(f"target must be finite, got {self.target}")


def percentile_target(dataset: CurveDataset, percentile: float) -> SuccessSpec:
    """Target equal to the given percentile of final values.

    Uses the ``higher`` convention so the target is an attained final value
    and at least one curve succeeds.
    """
    if not 0 <= percentile <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    return SuccessSpec(float(np.percentile(dataset.final_values(), percentile, method="higher")))


# -- io ---------------------------------------------------------------------


def _curve_from_record(rec, line: int) -> Curve:
    if not isinstance(rec, dict):
        raise CurveDataError("record is not an object", line)
    if "id" not in rec or "values" not in rec:
        raise CurveDataError("record needs 'id' and 'values'", line)
    if not isinstance(rec["id"], str):
        raise CurveDataError("'id' must be a string", line)
    values = rec["values"]
    costs = rec.get("costs")
    if not isinstance(values, list) or not all(_is_number(v) for v in values):
        raise CurveDataError("'values' must be an array of numbers", line)
    if costs is not None and (not isinstance(costs, list) or not all(_is_number(c) for c in costs)):
        raise CurveDataError("'costs' must be an array of numbers", line)
    try:
        return Curve(rec["id"], tuple(values), None if costs is None else tuple(costs))
    except CurveDataError as e:
        raise CurveDataError(str(e), line) from None


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        x = float(text)
    except ValueError:
        raise CurveDataError(f"bad {what} {text!r}", line) from None
    if not math.isfinite(x):
        raise CurveDataError(f"non-finite {what} {text!r}", line)
    return x


def _load_jsonl(path: Path) -> list[Curve]:
    curves, ids = [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                # NaN/Infinity literals are accepted by json; Curve rejects them.
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CurveDataError(f"invalid JSON ({e.msg})", lineno) from None
            curve = _curve_from_record(rec, lineno)
            if curve.id in ids:
                raise CurveDataError(f"duplicate curve id {curve.id!r}", lineno)
            ids[curve.id] = lineno
            curves.append(curve)
    return curves


def _load_csv(path: Path) -> list[Curve]:
    curves: list[Curve] = []
    done: set[str] = set()
    cur_id, cur_vals, cur_costs, cur_line = None, [], [], 0

    def flush():
        if cur_id is None:
            return
        try:
            curves.append(Curve(cur_id, tuple(cur_vals), tuple(cur_costs) if has_cost else None))
        except CurveDataError as e:
            raise CurveDataError(str(e), cur_line) from None
        done.add(cur_id)

    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise CurveDataError("empty file", 1)
        header = [h.strip() for h in header]
        if header not in (["run_id", "step", "value"], ["run_id", "step", "value", "cost"]):
            raise CurveDataError(f"unexpected header {header}", 1)
        has_cost = len(header) == 4
        for lineno, row in enumerate(reader, 2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise CurveDataError(f"expected {len(header)} fields, got {len(row)}", lineno)
            run_id = row[0].strip()
            try:
                step = int(row[1])
            except ValueError:
                raise CurveDataError(f"bad step {row[1]!r}", lineno) from None
            value = _parse_float(row[2], "value", lineno)
            cost = _parse_float(row[3], "cost", lineno) if has_cost else None
            if cost is not None and cost <= 0:
                raise CurveDataError(f"non-positive cost {cost}", lineno)
            if run_id != cur_id:
                flush()
                if run_id in done:
                    raise CurveDataError(f"rows for run {run_id!r} are not contiguous", lineno)
                cur_id, cur_vals, cur_costs, cur_line = run_id, [], [], lineno
            if step != len(cur_vals) + 1:
                raise CurveDataError(
                    f"run {run_id!r}: expected step {len(cur_vals) + 1}, got {step}", lineno
                )
            cur_vals.append(value)
            if has_cost:
                cur_costs.append(cost)
        flush()
    return curves


def load_curves(path, format: str | None = None) -> CurveDataset:
    """Load a dataset from JSONL or CSV.  Format defaults to the file suffix."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format == "jsonl":
        curves = _load_jsonl(path)
    elif format == "csv":
        curves = _load_csv(path)
    else:
        raise ValueError(f"unknown curve format {format!r}")
    if not curves:
        raise CurveDataError("empty file", 1)
    return CurveDataset(tuple(curves))


def dump_jsonl(dataset: CurveDataset) -> str:
    lines = []
    for c in dataset:
        rec = {"id": c.id, "values": list(c.values)}
        if c.costs is not None:
            rec["costs"] = list(c.costs)
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


# -- synthetic curves -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticFamily:
    """Saturating-exponential curve family: ``a_max * (1 - exp(-t / lam)) + noise``.

    ``a_max`` is uniform on ``[a_max_low, a_max_high]``, ``lam`` log-uniform on
    ``[lam_low, lam_high]``, noise is Gaussian with standard deviation ``noise``.
    """

    a_max_low: float = 0.5
    a_max_high: float = 1.0
    lam_low: float = 1.0
    lam_high: float = 20.0
    noise: float = 0.01

    def validate(self):
        if not (self.a_max_low <= self.a_max_high):
            raise ValueError("a_max bounds inverted")
        if not (0 < self.lam_low <= self.lam_high):
            raise ValueError("lambda bounds must satisfy 0 < lam_low <= lam_high")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


STRONG_SIGNAL = SyntheticFamily(a_max_low=0.3, a_max_high=0.95, lam_low=2.0, lam_high=12.0, noise=0.005)
"""Family whose early values strongly predict the final value."""


def generate_synthetic(
    n: int, T: int, family: SyntheticFamily = SyntheticFamily(), master_seed: int = 0
) -> CurveDataset:
    if n < 1 or T < 1:
        raise ValueError(f"need n >= 1 and T >= 1, got n={n}, T={T}")
    family.validate()
    rng = np.random.default_rng(master_seed)
    a_max = rng.uniform(family.a_max_low, family.a_max_high, size=n)
    lam = np.exp(rng.uniform(math.log(family.lam_low), math.log(family.lam_high), size=n))
    noise = rng.standard_normal((n, T)) * family.noise
    t = np.arange(1, T + 1)
    values = np.clip(a_max[:, None] * -np.expm1(-t[None, :] / lam[:, None]) + noise, 0.0, 1.0)
    width = len(str(n - 1))
    return CurveDataset(
        tuple(Curve(f"c{i:0{width}d}", tuple(values[i].tolist())) for i in range(n))
    )


# -- success & medians ------------------------------------------------------


def success_time(curve: Curve, spec: SuccessSpec) -> int | None:
    """1-based first step whose value reaches the target, or None."""
    for t, v in enumerate(curve.values, 1):
        if v >= spec.target:
            return t
    return None


def population_medians(dataset: CurveDataset) -> list[float]:
    """Lower median of the step-t values over curves at least t long."""
    medians = []
    for t in range(dataset.horizon):
        vals = sorted(c.values[t] for c in dataset if len(c) > t)
        medians.append(vals[(len(vals) - 1) // 2])
    return medians


# -- discretization ---------------------------------------------------------


@dataclass(frozen=True)
class DiscretizedRun:
    tokens: tuple[Token, ...]
    costs: tuple[float, ...]
    source_id: str = ""

    def __post_init__(self):
        if len(self.tokens) != len(self.costs):
            raise ValueError("tokens and costs are not aligned")
        if SUCCESS in self.tokens[:-1]:
            raise ValueError("success token must be final")

    @property
    def succeeded(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == SUCCESS


@dataclass
class _Node:
    cuts: tuple[float, ...]
    count: int
    kids: dict = field(default_factory=dict)

    def bucket(self, value: float) -> int:
        # first j with value <= cuts[j] -> bucket j+1; past every cut -> K
        return bisect_left(self.cuts, value) + 1


class QuantileDiscretizer:
    """Per-prefix quantile buckets learned from training curves.

    ``nodes`` maps each stored token prefix to the K-1 cut points applied to
    the next observation.
    """

    def __init__(self, K: int, min_count: int, target: float, root: _Node):
        self.K = K
        self.min_count = min_count
        self.trained_target = SuccessSpec(target)
        self._root = root

    @property
    def nodes(self) -> dict[tuple[Token, ...], tuple[float, ...]]:
        out = {}
        stack = [((), self._root)]
        while stack:
            prefix, node = stack.pop()
            out[prefix] = node.cuts
            for b, kid in node.kids.items():
                stack.append((prefix + (b,), kid))
        return out

    def walker(self) -> "_Walker":
        return _Walker(self)

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "min_count": self.min_count,
            "target": self.trained_target.target,
            "nodes": [
                [list(p), [_enc_float(x) for x in cuts]] for p, cuts in sorted(self.nodes.items())
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QuantileDiscretizer":
        nodes = {tuple(p): tuple(_dec_float(x) for x in cuts) for p, cuts in obj["nodes"]}
        if () not in nodes:
            raise ValueError("discretizer has no root node")
        built = {p: _Node(cuts, 0) for p, cuts in nodes.items()}
        for p, node in built.items():
            if p:
                built[p[:-1]].kids[p[-1]] = node
        return cls(int(obj["K"]), int(obj["min_count"]), float(obj["target"]), built[()])


def _enc_float(x: float):
    return x if math.isfinite(x) else ("-inf" if x < 0 else "inf")


def _dec_float(x) -> float:
    return float(x)


class _Walker:
    """Incremental discretization of one run, one value at a time."""

    __slots__ = ("_disc", "_node", "_fallback", "done")

    def __init__(self, disc: QuantileDiscretizer):
        self._disc = disc
        self._node = disc._root
        self._fallback = None
        self.done = False

    def step(self, value: float) -> Token:
        if self.done:
            raise RuntimeError("run already ended with success")
        if value >= self._disc.trained_target.target:
            self.done = True
            return SUCCESS
        if self._node is None:
            return self._fallback.bucket(value)
        b = self._node.bucket(value)
        kid = self._node.kids.get(b)
        if kid is None:
            self._fallback = self._node
        self._node = kid
        return b


def fit_discretizer(
    dataset: CurveDataset, spec: SuccessSpec, K: int, min_count: int = 1
) -> QuantileDiscretizer:
    """Recursively bucket next-step values by rank among runs sharing a prefix.

    Cut points are the per-bucket maxima; a child prefix is kept only when at
    least ``min_count`` training runs reach it.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    if len(dataset) == 0:
        raise CurveDataError("dataset has no curves")
    target = spec.target
    curves = dataset.curves
    # rank ties resolve by ascending curve id
    id_rank = {c.id: i for i, c in enumerate(sorted(curves, key=lambda c: c.id))}

    root = _Node((), len(curves))
    stack = [(root, list(range(len(curves))), 0)]
    while stack:
        node, members, depth = stack.pop()
        cont = [
            i for i in members
            if len(curves[i]) > depth and curves[i].values[depth] < target
        ]
        cont.sort(key=lambda i: (curves[i].values[depth], id_rank[curves[i].id]))
        m = len(cont)
        maxima = [-math.inf] * K
        for rank, i in enumerate(cont):
            b = min(K, 1 + (rank * K) // m)
            maxima[b - 1] = curves[i].values[depth]
        cuts, cut = [], -math.inf
        for j in range(K - 1):
            cut = max(cut, maxima[j])
            cuts.append(cut)
        node.cuts = tuple(cuts)
        groups: dict[int, list[int]] = {}
        for i in cont:
            groups.setdefault(node.bucket(curves[i].values[depth]), []).append(i)
        for b in sorted(groups):
            if len(groups[b]) >= min_count:
                kid = _Node((), len(groups[b]))
                node.kids[b] = kid
                stack.append((kid, groups[b], depth + 1))
    return QuantileDiscretizer(K, min_count, target, root)


def discretize(disc: QuantileDiscretizer, curve: Curve, spec: SuccessSpec | None = None) -> DiscretizedRun:
    if spec is not None and spec != disc.trained_target:
        raise ValueError(
            f"target {spec.target} differs from the discretizer's trained target "
            f"{disc.trained_target.target}"
        )
    w = disc.walker()
    tokens = []
    for v in curve.values:
        tokens.append(w.step(v))
        if w.done:
            break
    costs = tuple(curve.cost(t) for t in range(len(tokens)))
    return DiscretizedRun(tuple(tokens), costs, curve.id)


def discretize_all(disc: QuantileDiscretizer, dataset: CurveDataset) -> list[DiscretizedRun]:
    return [discretize(disc, c) for c in dataset]


def runs_from_tokens(sequences: Sequence[Sequence[Token]], costs=None) -> list[DiscretizedRun]:
    """Build runs directly from token sequences (unit costs unless given)."""
    out = []
    for i, seq in enumerate(sequences):
        cs = tuple(costs[i]) if costs is not None else (1.0,) * len(seq)
        out.append(DiscretizedRun(tuple(seq), cs, f"r{i}"))
    return out
