from __future__ import annotations

import numpy as np
import pytest

from cdbmm.cli import main
from cdbmm.io import DataError, RunConfig, load_dataset, read_table, write_dataset, write_table
from cdbmm.model import Dataset

FAST = ["--n-iter", "300", "--burn-in", "100", "--thin", "2"]


def _csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(input="d.csv", covariates=["a", "b"], categorical=["a"], hyper={"sigma2_beta": 5.0}, seed=9, caliper=0.2)
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert back.hyperparams.sigma2_beta == 5.0


def test_run_config_rejects_unknown_and_bad_values():
    with pytest.raises(ValueError, match="unknown configuration keys"):
        RunConfig.from_dict({"iterations": 5})
    with pytest.raises(ValueError):
        RunConfig(loss="hamming")
    with pytest.raises(ValueError):
        RunConfig(hyper={"L": 1})
    with pytest.raises(ValueError):
        RunConfig(caliper=0.0)


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv("CDBMM_OUTPUT_DIR", "/tmp/somewhere")
    assert str(RunConfig().resolved_output()) == "/tmp/somewhere"
    assert str(RunConfig(output_dir="here").resolved_output()) == "here"
    monkeypatch.delenv("CDBMM_OUTPUT_DIR")
    assert str(RunConfig().resolved_output()) == "cdbmm_out"


def test_load_dataset_and_delimiters(tmp_path):
    rows = [[1.5, 0, 1, 0], [2.5, 1, 0, 1], [0.5, 0, 1, 1]]
    _csv(tmp_path / "a.csv", ["y", "t", "x1", "x2"], rows)
    d = load_dataset(tmp_path / "a.csv", RunConfig(categorical=["x1"]))
    assert d.columns == ["x1", "x2"] and d.categorical == [True, False]
    assert np.array_equal(d.t, [0, 1, 0])
    (tmp_path / "b.tsv").write_text("y\tt\tx1\n1\t0\t3\n2\t1\t4\n")
    assert load_dataset(tmp_path / "b.tsv").X[:, 0].tolist() == [3.0, 4.0]


def test_load_dataset_bad_treatment_reports_row(tmp_path):
    rows = [[1.0, i % 2, 0.0] for i in range(10)]
    rows[6][1] = 2
    _csv(tmp_path / "d.csv", ["y", "t", "x"], rows)
    with pytest.raises(DataError, match=r"row 7, column 't'"):
        load_dataset(tmp_path / "d.csv")


def test_load_dataset_errors(tmp_path):
    _csv(tmp_path / "dup.csv", ["y", "t", "x", "x"], [[1, 0, 1, 1]])
    with pytest.raises(DataError, match="duplicated header name 'x'"):
        load_dataset(tmp_path / "dup.csv")
    _csv(tmp_path / "miss.csv", ["y", "t"], [[1, 0]])
    with pytest.raises(DataError, match="missing column 'z'"):
        load_dataset(tmp_path / "miss.csv", RunConfig(covariates=["z"]))
    _csv(tmp_path / "nan.csv", ["y", "t", "x"], [[1, 0, 1], [1, 1, "abc"]])
    with pytest.raises(DataError, match=r"row 2, column 'x': non-numeric"):
        load_dataset(tmp_path / "nan.csv")
    _csv(tmp_path / "inf.csv", ["y", "t", "x"], [[1, 0, 1], ["inf", 1, 0]])
    with pytest.raises(DataError, match="non-finite"):
        load_dataset(tmp_path / "inf.csv")
    _csv(tmp_path / "arm.csv", ["y", "t", "x"], [[1, 0, 1], [2, 0, 0]])
    with pytest.raises(DataError, match="arm 1 is empty"):
        load_dataset(tmp_path / "arm.csv")
    with pytest.raises(DataError, match="not found"):
        load_dataset(tmp_path / "none.csv")


def test_table_round_trip_is_exact(tmp_path):
    vals = np.random.default_rng(0).normal(size=(5, 3))
    write_table(tmp_path / "t.csv", ["a", "b", "c"], vals)
    header, back = read_table(tmp_path / "t.csv")
    assert header == ["a", "b", "c"] and np.array_equal(back, vals)
    d = Dataset(vals[:, 0], [0, 1, 0, 1, 1], vals[:, 1:], ["u", "v"])
    write_dataset(tmp_path / "d.csv", d)
    e = load_dataset(tmp_path / "d.csv")
    assert np.array_equal(e.y, d.y) and np.array_equal(e.X, d.X)


def test_simulate_then_fit_scenario_seven(tmp_path, capsys):
    sim_dir, fit_dir = tmp_path / "sim", tmp_path / "fit"
    assert main(["simulate", "--scenario", "7", "--n", "200", "--seed", "1", "--out", str(sim_dir)]) == 0
    assert (sim_dir / "manifest.txt").exists()
    args = ["fit", "--input", str(sim_dir / "data.csv"), "--categorical", "X1,X2", "--seed", "2", "--out", str(fit_dir), *FAST]
    assert main(args) == 0
    _, summary = read_table(fit_dir / "group_summary.csv")
    assert summary.shape[0] == 1
    _, ate = read_table(fit_dir / "ate_summary.csv")
    assert abs(ate[0, 0] - 1.0) < 0.2
    for name in ("groups.csv", "partition_arm0.txt", "gate_samples.csv", "plot_profiles.csv",
                 "plot_gate_density.csv", "traces/trace_eta_arm1.csv", "config.json"):
        assert (fit_dir / name).exists(), name
    manifest = (fit_dir / "manifest.txt").read_text()
    assert "seed: 2" in manifest and "file: traces/trace_S_arm0.csv" in manifest
    assert "1 group(s)" in capsys.readouterr().out


def test_fit_twice_is_byte_identical(tmp_path):
    main(["simulate", "--scenario", "1", "--n", "150", "--seed", "4", "--out", str(tmp_path / "sim")])
    outs = []
    for k in range(2):
        out = tmp_path / f"fit{k}"
        assert main(["fit", "--input", str(tmp_path / "sim" / "data.csv"), "--seed", "5", "--out", str(out), *FAST]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
    assert len(files) > 10
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_fit_with_matching_and_config_file(tmp_path):
    main(["simulate", "--scenario", "1", "--n", "200", "--seed", "6", "--out", str(tmp_path / "sim")])
    cfg_path = tmp_path / "run.json"
    args = ["fit", "--input", str(tmp_path / "sim" / "data.csv"), "--match", "--out", str(tmp_path / "fit"),
            "--write-config", str(cfg_path), *FAST]
    assert main(args) == 0
    cfg = RunConfig.load(cfg_path)
    assert cfg.match and cfg.n_iter == 300
    header, bal = read_table_text(tmp_path / "fit" / "balance.csv")
    assert header[:3] == ["covariate", "smd_before", "smd_after"] and bal[-1][0] == "propensity"
    _, pairs = read_table(tmp_path / "fit" / "matched_pairs.csv")
    _, groups = read_table(tmp_path / "fit" / "groups.csv")
    assert groups.shape[0] == 2 * pairs.shape[0]
    # a rerun from the saved configuration alone reproduces the outputs
    cfg2 = RunConfig.from_dict({**cfg.to_dict(), "output_dir": str(tmp_path / "fit2")})
    cfg2.save(tmp_path / "run2.json")
    assert main(["fit", "--config", str(tmp_path / "run2.json")]) == 0
    assert (tmp_path / "fit" / "groups.csv").read_bytes() == (tmp_path / "fit2" / "groups.csv").read_bytes()


def read_table_text(path):
    lines = [ln.split(",") for ln in path.read_text().splitlines()]
    return lines[0], lines[1:]


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["fit", "--input", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["fit", "--out", str(tmp_path / "o")]) == 1


def test_study_subcommand(tmp_path, capsys):
    out = tmp_path / "study"
    args = ["study", "--scenario", "7", "--reps", "2", "--n", "100", "--workers", "1", "--out", str(out), *FAST]
    assert main(args) == 0
    header, rows = read_table(out / "study_replicates.csv")
    assert rows.shape[0] == 2 and "ari" in header
    assert "scenario 7" in capsys.readouterr().out
