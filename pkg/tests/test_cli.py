import io
import json
import math

import pytest

from optstop.cli import main
from optstop.curves import (
    SyntheticFamily,
    discretize_all,
    fit_discretizer,
    generate_synthetic,
    load_curves,
    percentile_target,
)
from optstop.policy import brute_force_optimal


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out_stream=out)
    return code, out.getvalue()


@pytest.fixture
def two_seq(tmp_path):
    p = tmp_path / "two.jsonl"
    p.write_text('{"id":"a","values":[0.95]}\n{"id":"b","values":[0.1,0.1,0.1]}\n')
    return p


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.jsonl"
    assert run("gen", "--config", str(_cfg(tmp_path, "synthetic_n = 60\nsynthetic_T = 12\n")),
               "--seed", "4", "--out", str(p))[0] == 0
    return p


def _cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- gen ----------------------------------------------------------------------------


def test_gen_roundtrip_and_rerun(tmp_path):
    cfg = _cfg(tmp_path, "synthetic_n = 5\nsynthetic_T = 4\nnoise = 0.02\n")
    out = tmp_path / "g.jsonl"
    assert run("gen", "--config", str(cfg), "--seed", "9", "--out", str(out))[0] == 0
    first = out.read_bytes()
    assert load_curves(out) == generate_synthetic(5, 4, SyntheticFamily(noise=0.02), 9)
    assert run("gen", "--config", str(cfg), "--seed", "9", "--out", str(out))[0] == 2
    assert run("gen", "--config", str(cfg), "--seed", "9", "--out", str(out), "--overwrite")[0] == 0
    assert out.read_bytes() == first


def test_gen_rejects_zero_curves(tmp_path):
    cfg = _cfg(tmp_path, "synthetic_n = 0\nsynthetic_T = 4\n")
    assert run("gen", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "x.jsonl"))[0] == 2


# -- fit ------------------------------------------------------------------------------


def test_fit_two_sequence(tmp_path, two_seq):
    policy = tmp_path / "p.json"
    code, text = run("fit", "--curves", str(two_seq), "--target", "0.9", "--k-set", "2",
                     "--min-count", "1", "--out", str(policy))
    assert code == 0
    report = json.loads(text)
    assert report["stats"]["ratio"] == 0.5
    assert report["stats"]["expected_time"] == 2.0
    assert report["improvement_over_random"] == 2.0
    obj = json.loads(policy.read_text())
    assert obj["continue_prefixes"] == [[]]


def test_fit_unreachable(tmp_path, two_seq, capsys):
    code, _ = run("fit", "--curves", str(two_seq), "--target", "0.99", "--k-set", "2")
    assert code == 4
    assert "success unreachable" in capsys.readouterr().err


def test_fit_epsilon_bound(tmp_path):
    tiny = tmp_path / "tiny.jsonl"
    cfg = _cfg(tmp_path, "synthetic_n = 6\nsynthetic_T = 3\nnoise = 0.05\n", "gen.cfg")
    assert run("gen", "--config", str(cfg), "--seed", "2", "--out", str(tiny))[0] == 0
    d = load_curves(tiny)
    spec = percentile_target(d, 70)
    r_star, _ = brute_force_optimal(discretize_all(fit_discretizer(d, spec, 6, 1), d))
    cfg = _cfg(tmp_path, "refine = false\n")
    for eps in (0.5, 0.001):
        code, text = run("fit", "--config", str(cfg), "--curves", str(tiny), "--target-percentile", "70",
                         "--k-set", "6", "--min-count", "1", "--epsilon", str(eps))
        assert code == 0
        ratio = json.loads(text)["stats"]["ratio"]
        assert r_star / (1 + eps) <= ratio <= r_star * (1 + 1e-12)


def test_fit_with_cv_needs_fold_seed(tmp_path, small):
    code, _ = run("fit", "--curves", str(small), "--target-percentile", "90")
    assert code == 2
    cfg = _cfg(tmp_path, "fold_seed = 3\n")
    code, text = run("fit", "--config", str(cfg), "--curves", str(small), "--target-percentile", "90")
    assert code == 0
    assert json.loads(text)["K"] in (2, 3, 4)


# -- sweep ------------------------------------------------------------------------------


def test_sweep(tmp_path):
    p = tmp_path / "m.csv"
    rows = ["run_id,step,value"]
    for r in range(4):
        for t in range(1, 6):
            rows.append(f"r{r},{t},{0.95 if t == 5 and r % 2 else 0.1 * t}")
    p.write_text("\n".join(rows) + "\n")
    code, text = run("sweep", "--curves", str(p), "--target", "0.9")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "t,expected_time"
    assert len(lines) == 6
    assert [ln.split(",")[1] for ln in lines[1:5]] == ["inf"] * 4
    assert float(lines[5].split(",")[1]) == 10.0


# -- simulate ------------------------------------------------------------------------------


def test_simulate_random_only(two_seq):
    code, text = run("simulate", "--curves", str(two_seq), "--target", "0.9", "--trials", "500",
                     "--seed", "1", "--policies", "random")
    assert code == 0
    report = json.loads(text)
    assert report["policy"] == "random" and report["improvement_over_random"] == 1.0
    assert set(report) == {"policy", "target", "trials", "mean_time", "std_error", "censored",
                           "improvement_over_random"}


def test_simulate_needs_seed(two_seq):
    assert run("simulate", "--curves", str(two_seq), "--target", "0.9")[0] == 2


def test_simulate_unknown_policy(two_seq):
    code, _ = run("simulate", "--curves", str(two_seq), "--target", "0.9", "--seed", "1",
                  "--policies", "bogus")
    assert code == 2


def test_simulate_all_policy_names(tmp_path, small):
    policy = tmp_path / "p.json"
    assert run("fit", "--curves", str(small), "--target-percentile", "90", "--k-set", "2",
               "--out", str(policy))[0] == 0
    names = ["random", "fixed:6", "luby", "above-median", "above-median-algorithm", "explore-exploit",
             "sh", "sh:9:3:12", "hyperband", "hyperband:12:2", f"optimal:{policy}"]
    code, text = run("simulate", "--curves", str(small), "--target-percentile", "90", "--trials", "40",
                     "--seed", "3", "--policies", ",".join(names))
    assert code == 0
    reports = [json.loads(ln) for ln in text.splitlines()]
    assert [r["policy"] for r in reports] == names
    assert all(r["trials"] == 40 for r in reports)


def test_fitted_policy_beats_random(tmp_path):
    d = tmp_path / "bench.jsonl"
    cfg = _cfg(tmp_path, "synthetic_n = 200\nsynthetic_T = 40\na_max_low = 0.3\na_max_high = 0.95\n"
                         "lam_low = 2\nlam_high = 12\nnoise = 0.005\n")
    assert run("gen", "--config", str(cfg), "--seed", "21", "--out", str(d))[0] == 0
    policy = tmp_path / "p.json"
    fit_cfg = _cfg(tmp_path, "fold_seed = 0\n", "fit.cfg")
    assert run("fit", "--config", str(fit_cfg), "--curves", str(d), "--target-percentile", "90",
               "--out", str(policy))[0] == 0
    code, text = run("simulate", "--curves", str(d), "--target-percentile", "90", "--trials", "3000",
                     "--seed", "5", "--policies", f"random,optimal:{policy}")
    assert code == 0
    rand, opt = (json.loads(ln) for ln in text.splitlines())
    gap = rand["mean_time"] - opt["mean_time"]
    assert gap > 3 * math.hypot(rand["std_error"], opt["std_error"])
    assert opt["improvement_over_random"] > 1


# -- cv ---------------------------------------------------------------------------------------


def test_cv_report(tmp_path, small):
    cfg = _cfg(tmp_path, "fold_seed = 2\nfolds = 4\n")
    code, text = run("cv", "--config", str(cfg), "--curves", str(small), "--target-percentile", "90")
    assert code == 0
    report = json.loads(text)
    assert set(report["per_K"]) == {"2", "3", "4"}
    folds = report["per_K"]["2"]["folds"]
    assert len(folds) == 4 and set(folds[0]) == {"q", "c"}
    assert report["K_best"] in (2, 3, 4)


def test_cv_rejects_bad_folds(tmp_path, small):
    cfg = _cfg(tmp_path, "fold_seed = 2\n")
    for folds in ("1", "1000"):
        assert run("cv", "--config", str(cfg), "--curves", str(small), "--target-percentile", "90",
                   "--folds", folds)[0] == 2


def test_cv_needs_fold_seed(small):
    assert run("cv", "--curves", str(small), "--target-percentile", "90")[0] == 2


# -- errors -------------------------------------------------------------------------------------


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id":"a","values":[NaN]}\n')
    assert run("sweep", "--curves", str(bad), "--target", "0.5")[0] == 3
    assert run("sweep", "--curves", str(tmp_path / "missing.jsonl"), "--target", "0.5")[0] == 3


def test_config_errors(tmp_path, two_seq):
    assert run("sweep", "--config", str(_cfg(tmp_path, "nonsense = 1\n")), "--curves", str(two_seq),
               "--target", "0.9")[0] == 2
    assert run("sweep", "--config", str(_cfg(tmp_path, "trials = many\n")), "--curves", str(two_seq),
               "--target", "0.9")[0] == 2
    assert run("sweep", "--curves", str(two_seq))[0] == 2
    both = _cfg(tmp_path, f"curves_path = {two_seq}\nsynthetic_n = 3\nsynthetic_T = 2\nsynthetic_seed = 1\n")
    assert run("sweep", "--config", str(both), "--target", "0.9")[0] == 2


def test_config_comments_and_flag_precedence(tmp_path, two_seq):
    cfg = _cfg(tmp_path, f"# sweep setup\ncurves_path = {two_seq}  # the fixture\ntarget_percentile = 50\n")
    code, text = run("sweep", "--config", str(cfg), "--target", "0.9")
    assert code == 0
    assert text.splitlines()[1] == "1,2.0"
