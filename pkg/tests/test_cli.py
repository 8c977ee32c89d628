import json

import numpy as np
import pytest

from contractive_sa.cli import (
    EXIT_CONDITIONS,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    ConfigError,
    Writer,
    main,
    read_table,
    resolve_config,
    run_experiment,
)

SMALL_SIMULATE = {"experiment": "simulate", "run": {"n": 50, "k_max": 100, "master_seed": 3}}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_simulate_writes_manifest_and_table(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", write_config(tmp_path, SMALL_SIMULATE), "--output", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"envelope.csv", "manifest.json"}
    table = read_table(out / "envelope.csv")
    assert table["k"].tolist() == list(range(101))
    assert np.all(table["q05"] <= table["q50"]) and np.all(table["q95"] <= table["max"])
    assert np.all(table["max"] <= table["bound"] * (1 + 1e-9))


def test_manifest_records_ledger_constants_and_seeds(tmp_path):
    res = run_experiment(SMALL_SIMULATE, output_dir=tmp_path)
    ledger = res.manifest["ledger"]
    for key in ("D0", "D1", "D2", "D3", "D4", "theta", "c1", "c1_prime", "regime"):
        assert key in ledger
    assert res.manifest["seeds"] == {"master_seed": 3, "streams": [0, 49]}
    assert res.manifest["conditions"]["passed"] and not res.manifest["forced"]


def test_reruns_are_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(SMALL_SIMULATE, output_dir=a, workers=1)
    run_experiment(SMALL_SIMULATE, output_dir=b, workers=3)
    for name in ("envelope.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_table_round_trip_is_exact(tmp_path):
    w = Writer(tmp_path, ["csv"])
    vals = np.random.default_rng(0).standard_normal(50) * 10.0 ** np.arange(-25, 25)
    w.table("t.csv", ("k", "v", "empty"), [np.arange(50), vals, None])
    back = read_table(tmp_path / "t.csv")
    np.testing.assert_array_equal(back["v"], vals)
    assert np.all(np.isnan(back["empty"]))


def test_output_dir_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "env"))
    res = run_experiment(SMALL_SIMULATE)
    assert res.directory == tmp_path / "env"
    assert (tmp_path / "env" / "manifest.json").exists()


def test_failed_conditions_exit_two_unless_forced(tmp_path):
    doc = {**SMALL_SIMULATE, "schedule": {"alpha": 0.5}}
    path = write_config(tmp_path, doc)
    assert main(["simulate", path, "--output", str(tmp_path / "x")]) == EXIT_CONDITIONS
    assert not (tmp_path / "x").exists()
    assert main(["simulate", path, "--output", str(tmp_path / "y"), "--force"]) == EXIT_OK
    assert json.loads((tmp_path / "y" / "manifest.json").read_text())["forced"] is True


@pytest.mark.parametrize(
    "doc",
    [
        {"experiment": "simulate", "bogus": 1},
        {"experiment": "bounds"},
        {"experiment": "simulate", "run": {"n": 0}},
        {"experiment": "simulate", "problem": {"kind": "hard_example", "a": 1.5}},
        [1, 2],
    ],
    ids=["unknown-key", "wrong-experiment", "bad-n", "bad-instance", "not-an-object"],
)
def test_invalid_configs_exit_three(tmp_path, doc):
    assert main(["simulate", write_config(tmp_path, doc), "--output", str(tmp_path / "o")]) == EXIT_CONFIG


def test_io_failures_exit_four(tmp_path):
    assert main(["simulate", str(tmp_path / "missing.json")]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["simulate", write_config(tmp_path, SMALL_SIMULATE), "--output", str(blocker / "sub")]) == EXIT_IO


def test_resolve_config_fills_defaults():
    cfg = resolve_config({"experiment": "rl_demo"})
    assert cfg["problem"]["algorithm"] == "q_learning"
    assert cfg["run"]["k_tail"] == cfg["run"]["k_max"] == 10_000
    with pytest.raises(ConfigError, match="run/delta"):
        resolve_config({"experiment": "audit", "run": {"delta": 2}})


def test_bounds_recipe_shows_the_log_free_curve_closing_in(tmp_path):
    res = run_experiment({"experiment": "bounds", "run": {"k_max": 100_000}}, output_dir=tmp_path)
    assert set(res.summary["curves"]) == {"worst_case", "thm1_Dpos", "thm1_prime"}
    base = read_table(tmp_path / "curve_thm1_Dpos.csv")
    prime = read_table(tmp_path / "curve_thm1_prime.csv")
    ks = [10**3, 10**4, 10**5]
    ratio = [prime["bound"][k] / base["bound"][k] for k in ks]
    assert np.all(np.diff(ratio) < 0)


def test_hard_example_recipe(tmp_path):
    res = run_experiment({"experiment": "hard_example", "run": {"n": 200, "k_max": 200}}, output_dir=tmp_path)
    assert res.summary["exact_increasing_from_k10"]
    assert res.summary["worst_case_violations"] == 0
    assert res.summary["witness"]["first_k_log_bound_above_100"] is not None
    exact = read_table(tmp_path / "mgf_exact.csv")
    finite = ~np.isnan(exact["log_lower_bound"])
    assert np.all(exact["log_lower_bound"][finite] <= exact["log_mgf"][finite] + 1e-9)


def test_other_recipes_run(tmp_path):
    res = run_experiment({"experiment": "rl_demo", "run": {"n": 20, "k_max": 200}}, output_dir=tmp_path / "rl")
    assert res.summary["peak_norm"]["passes"]
    res = run_experiment(
        {"experiment": "verify_machinery", "run": {"n": 10_000, "check_k_max": 5}}, output_dir=tmp_path / "vm"
    )
    assert res.summary["mgf_recursion"]["passed"] and res.summary["supermartingale"]["passed"]
    res = run_experiment(
        {"experiment": "tailfit", "problem": {"kind": "affine", "x0": 0.0}, "run": {"n": 10_000, "k_max": 50, "n_boot": 0}},
        output_dir=tmp_path / "tf",
    )
    assert 1.5 <= res.summary["fit"]["beta_hat"] <= 2.5
    res = run_experiment(
        {"experiment": "audit", "problem": {"kind": "mdp", "algorithm": "offpolicy_td",
                                            "source": {"garnet": {"n_states": 3, "n_actions": 2, "branching": 3,
                                                                  "gamma": 0.8, "seed": 1}}},
         "run": {"n": 20, "k_max": 100}},
        output_dir=tmp_path / "op",
    )
    assert all(a["violations"] == 0 for a in res.summary["audits"].values())
