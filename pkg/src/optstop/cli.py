"""Command-line entry point: gen, fit, sweep, simulate, cv.

Every command reads a flat ``key = value`` config file (``--config``) and
per-command flag overrides.  Exit codes: 0 ok, 2 config error, 3 data error,
4 success unreachable.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from functools import partial
from pathlib import Path

from . import baselines
from .curves import (
    CurveDataError,
    CurveDataset,
    SuccessSpec,
    SyntheticFamily,
    dump_jsonl,
    generate_synthetic,
    load_curves,
    percentile_target,
    population_medians,
)
from .evaluation import (
    AboveMedianAlgorithm,
    ExploreExploitConfig,
    ExploreExploitPolicy,
    fit_quantile_policy,
    improvement_over_random,
    random_search_time,
    select_best_quantile_policy,
)
from .policy import FittedRule, FixedThresholdRule, SuccessUnreachable
from .simulator import StaticRestartPolicy, simulate_time_to_success

log = logging.getLogger("optstop")

EXIT_CONFIG, EXIT_DATA, EXIT_UNREACHABLE = 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    curves_path: str | None = None
    curves_format: str | None = None
    synthetic_n: int | None = None
    synthetic_T: int | None = None
    synthetic_seed: int | None = None
    a_max_low: float = SyntheticFamily.a_max_low
    a_max_high: float = SyntheticFamily.a_max_high
    lam_low: float = SyntheticFamily.lam_low
    lam_high: float = SyntheticFamily.lam_high
    noise: float = SyntheticFamily.noise
    target: float | None = None
    target_percentile: float | None = None
    k_set: tuple[int, ...] = (2, 3, 4)
    min_count: int = 4
    epsilon: float = 0.01
    refine: bool = True
    folds: int = 5
    trials: int = 4000
    cap: float | None = None
    master_seed: int | None = None
    fold_seed: int | None = None
    policies: tuple[str, ...] = ("random",)
    refit_period: int = 8
    exploration_percentile: float = 90.0
    workers: int = 1
    out: str | None = None
    overwrite: bool = False

    @property
    def synthetic(self) -> bool:
        return any(v is not None for v in (self.synthetic_n, self.synthetic_T, self.synthetic_seed))

    def family(self) -> SyntheticFamily:
        return SyntheticFamily(self.a_max_low, self.a_max_high, self.lam_low, self.lam_high, self.noise)

    def ee_config(self) -> ExploreExploitConfig:
        return ExploreExploitConfig(
            K_set=self.k_set,
            folds=self.folds,
            min_count=self.min_count,
            epsilon=self.epsilon,
            refit_period=self.refit_period,
            exploration_percentile=self.exploration_percentile,
            fold_seed=self.fold_seed if self.fold_seed is not None else 0,
        )


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_list(text: str, conv):
    return tuple(conv(x.strip()) for x in text.split(",") if x.strip())


_CONVERTERS = {
    "curves_path": str,
    "curves_format": str,
    "synthetic_n": int,
    "synthetic_T": int,
    "synthetic_seed": int,
    "a_max_low": float,
    "a_max_high": float,
    "lam_low": float,
    "lam_high": float,
    "noise": float,
    "target": float,
    "target_percentile": float,
    "k_set": partial(_parse_list, conv=int),
    "min_count": int,
    "epsilon": float,
    "refine": _parse_bool,
    "folds": int,
    "trials": int,
    "cap": float,
    "master_seed": int,
    "fold_seed": int,
    "policies": partial(_parse_list, conv=str),
    "refit_period": int,
    "exploration_percentile": float,
    "workers": int,
    "out": str,
    "overwrite": _parse_bool,
}
assert set(_CONVERTERS) == {f.name for f in fields(ExperimentConfig)}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _CONVERTERS[key](value)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    return out


def build_config(args) -> ExperimentConfig:
    values = read_config(args.config) if args.config else {}
    overrides = {
        "target": args.target,
        "target_percentile": args.target_percentile,
        "trials": args.trials,
        "epsilon": args.epsilon,
        "k_set": args.k_set,
        "min_count": args.min_count,
        "folds": args.folds,
        "policies": args.policies,
        "out": args.out,
        "curves_path": args.curves,
        "workers": args.workers,
    }
    for key, raw in overrides.items():
        if raw is None:
            continue
        values[key] = _CONVERTERS[key](raw) if isinstance(raw, str) else raw
    if args.seed is not None:
        values["synthetic_seed" if args.command == "gen" else "master_seed"] = args.seed
    if args.overwrite:
        values["overwrite"] = True
    if "target" in values and "target_percentile" in values:
        # a flag beats the config file
        if args.target is not None:
            values.pop("target_percentile")
        elif args.target_percentile is not None:
            values.pop("target")
    return ExperimentConfig(**values)


def load_dataset(cfg: ExperimentConfig) -> CurveDataset:
    if cfg.curves_path and cfg.synthetic:
        raise ConfigError("give either curves_path or a synthetic block, not both")
    if cfg.curves_path:
        return load_curves(cfg.curves_path, cfg.curves_format)
    if cfg.synthetic:
        return _synthetic(cfg)
    raise ConfigError("no data: set curves_path or synthetic_n/synthetic_T/synthetic_seed")


def _synthetic(cfg: ExperimentConfig) -> CurveDataset:
    if cfg.synthetic_n is None or cfg.synthetic_T is None or cfg.synthetic_seed is None:
        raise ConfigError("synthetic data needs synthetic_n, synthetic_T and synthetic_seed")
    try:
        return generate_synthetic(cfg.synthetic_n, cfg.synthetic_T, cfg.family(), cfg.synthetic_seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def resolve_target(cfg: ExperimentConfig, dataset: CurveDataset) -> SuccessSpec:
    if cfg.target is not None and cfg.target_percentile is not None:
        raise ConfigError("give either target or target_percentile, not both")
    if cfg.target is not None:
        return SuccessSpec(cfg.target)
    if cfg.target_percentile is not None:
        try:
            return percentile_target(dataset, cfg.target_percentile)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    raise ConfigError("no target: set target or target_percentile")


def _require(cfg: ExperimentConfig, *names):
    for name in names:
        if getattr(cfg, name) is None:
            raise ConfigError(f"{name} is required")


def _num(x: float):
    return x if math.isfinite(x) else "inf"


def _emit(text: str, cfg: ExperimentConfig, out_stream):
    if cfg.out:
        Path(cfg.out).write_text(text, encoding="utf-8")
    else:
        out_stream.write(text)


# -- commands ---------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, out_stream) -> int:
    if not cfg.out:
        raise ConfigError("gen needs --out")
    dataset = _synthetic(cfg)
    path = Path(cfg.out)
    if path.exists() and not cfg.overwrite:
        raise ConfigError(f"{path} exists; pass --overwrite to replace it")
    path.write_text(dump_jsonl(dataset), encoding="utf-8")
    return 0


def cmd_fit(cfg: ExperimentConfig, out_stream) -> int:
    dataset = load_dataset(cfg)
    spec = resolve_target(cfg, dataset)
    report = {"target": spec.target}
    if len(cfg.k_set) == 1:
        rule = fit_quantile_policy(dataset, spec, cfg.k_set[0], cfg.min_count, cfg.epsilon, cfg.refine)
        report["K"] = cfg.k_set[0]
    else:
        _require(cfg, "fold_seed")
        sel = select_best_quantile_policy(
            dataset, spec, cfg.k_set, cfg.folds, cfg.min_count, cfg.epsilon, cfg.fold_seed, cfg.refine
        )
        rule = sel.rule
        report["K"] = sel.K_best
        report["cv_low_variance"] = _num(sel.estimate.low_variance)
    report["stats"] = rule.stats.to_json()
    report["continue_nodes"] = len(rule.tree)
    report["improvement_over_random"] = _num(
        improvement_over_random(rule.stats.expected_time, dataset, spec)
    )
    if cfg.out:
        Path(cfg.out).write_text(json.dumps(rule.to_json()) + "\n", encoding="utf-8")
    out_stream.write(json.dumps(report) + "\n")
    return 0


def cmd_sweep(cfg: ExperimentConfig, out_stream) -> int:
    dataset = load_dataset(cfg)
    spec = resolve_target(cfg, dataset)
    rows = baselines.threshold_sweep(dataset, spec, range(1, dataset.horizon + 1))
    lines = ["t,expected_time"]
    for t, stats in rows:
        et = stats.expected_time
        lines.append(f"{t},{et!r}" if math.isfinite(et) else f"{t},inf")
    _emit("\n".join(lines) + "\n", cfg, out_stream)
    return 0


def make_policy_factory(name: str, dataset: CurveDataset, cfg: ExperimentConfig):
    """Picklable zero-argument factory for the named policy."""
    head, _, rest = name.partition(":")
    args = rest.split(":") if rest else []
    try:
        if head == "random" and not args:
            return partial(StaticRestartPolicy, FixedThresholdRule(None))
        if head == "fixed" and len(args) == 1:
            return partial(StaticRestartPolicy, FixedThresholdRule(int(args[0])))
        if head == "luby" and not args:
            return baselines.LubyPolicy
        if head == "above-median" and not args:
            return partial(StaticRestartPolicy, baselines.AboveMedianRule(population_medians(dataset)))
        if head == "above-median-algorithm" and not args:
            return partial(AboveMedianAlgorithm, cfg.ee_config())
        if head == "explore-exploit" and not args:
            return partial(ExploreExploitPolicy, cfg.ee_config())
        if head == "sh" and len(args) <= 3:
            eta = int(args[1]) if len(args) > 1 else 3
            R = int(args[2]) if len(args) > 2 else dataset.horizon
            n = int(args[0]) if args else eta ** baselines._floor_log(R, eta)
            return baselines.SuccessiveHalvingFactory(n, eta, R)
        if head == "hyperband" and len(args) <= 2:
            R = int(args[0]) if args else dataset.horizon
            eta = int(args[1]) if len(args) > 1 else 3
            return baselines.HyperbandFactory(R, eta)
        if head == "optimal" and rest:
            obj = json.loads(Path(rest).read_text(encoding="utf-8"))
            return partial(StaticRestartPolicy, FittedRule.from_json(obj))
    except (ValueError, KeyError, OSError) as e:
        raise ConfigError(f"policy {name!r}: {e}") from None
    raise ConfigError(f"unknown policy {name!r}")


def cmd_simulate(cfg: ExperimentConfig, out_stream) -> int:
    _require(cfg, "master_seed")
    dataset = load_dataset(cfg)
    spec = resolve_target(cfg, dataset)
    factories = [(name, make_policy_factory(name, dataset, cfg)) for name in cfg.policies]
    if not factories:
        raise ConfigError("no policies given")

    def run(factory):
        return simulate_time_to_success(
            factory, dataset, spec, cfg.trials, cfg.cap, cfg.master_seed, cfg.workers
        )

    results = {name: run(f) for name, f in factories}
    rand = results.get("random") or run(make_policy_factory("random", dataset, cfg))
    lines = []
    for name, _ in factories:
        res = results[name]
        report = {"policy": name, "target": spec.target}
        report.update(res.to_json())
        report["improvement_over_random"] = _num(rand.mean_time / res.mean_time)
        lines.append(json.dumps(report))
    _emit("\n".join(lines) + "\n", cfg, out_stream)
    return 0


def cmd_cv(cfg: ExperimentConfig, out_stream) -> int:
    _require(cfg, "fold_seed")
    dataset = load_dataset(cfg)
    spec = resolve_target(cfg, dataset)
    if cfg.folds < 2 or cfg.folds > len(dataset):
        raise ConfigError(f"folds must be in 2..{len(dataset)}, got {cfg.folds}")
    if not math.isfinite(random_search_time(dataset, spec)):
        raise SuccessUnreachable(f"success unreachable: no curve reaches {spec.target}")
    sel = select_best_quantile_policy(
        dataset, spec, cfg.k_set, cfg.folds, cfg.min_count, cfg.epsilon, cfg.fold_seed, cfg.refine
    )
    report = {
        "target": spec.target,
        "per_K": {str(K): est.to_json() for K, est in sel.per_K.items()},
        "K_best": sel.K_best,
        "improvement_over_random": _num(
            improvement_over_random(sel.estimate.low_variance, dataset, spec)
        ),
    }
    _emit(json.dumps(report) + "\n", cfg, out_stream)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "cv": cmd_cv,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optstop", description="Optimal early-stopping/restart policies from observation curves."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--curves", help="curve file (JSONL or CSV)")
        p.add_argument("--target", type=float)
        p.add_argument("--target-percentile", type=float)
        p.add_argument("--trials", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--k-set", help="comma-separated bucket counts, e.g. 2,3,4")
        p.add_argument("--min-count", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--policies", help="comma-separated policy names")
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
        p.add_argument("--overwrite", action="store_true")
    return parser


def main(argv=None, out_stream=None) -> int:
    out_stream = out_stream or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, out_stream)
    except SuccessUnreachable as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except (CurveDataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
