import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from dmlrc import __version__
from dmlrc.cli import main
from dmlrc.errors import ConvergenceError
from dmlrc.pipeline import Table, write_csv
from dmlrc.simulation import METRIC_COLUMNS
from synth import pipeline_tables

SCHEMA = ("outcome: y\nexposures: [A, B]\n"
          "covariates: {age: continuous, smoke: categorical}\nid: id\n")


@pytest.fixture
def files(tmp_path):
    ms, evs = pipeline_tables(3, N=300, n=120)
    write_csv(ms, tmp_path / "main.csv")
    write_csv(evs, tmp_path / "evs.csv")
    (tmp_path / "schema.yaml").write_text(SCHEMA)
    return tmp_path


def analyze_args(d, *extra, methods="slr-corrected,dml-corrected", seed="11"):
    return ["analyze", "--main", str(d / "main.csv"), "--validation", str(d / "evs.csv"),
            "--schema", str(d / "schema.yaml"), "--methods", methods, "--seed", seed,
            "--out", str(d / "report.json"), *extra]


# -- simulate ------------------------------------------------------------------


def test_simulate_writes_csv_and_meta(tmp_path):
    out = tmp_path / "m.csv"
    code = main(["simulate", "--scenario", "1", "--rho", "0.8", "--replicates", "3",
                 "--seed", "0x2a", "--methods", "slr-corrected,dml-corrected",
                 "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == list(METRIC_COLUMNS)
    assert [(r["method"], r["mode"]) for r in rows] == [("slr", "corrected"),
                                                         ("dml", "corrected")]
    assert rows[0]["mse_ratio"] == rows[1]["mse_ratio"]
    meta = json.loads((tmp_path / "m.csv.meta.json").read_text())
    assert meta["base_seed"] == 42 and meta["R"] == 3 and meta["version"] == __version__


def test_simulate_config_file(tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text("scenario: 2\nrho: 0.6\nR: 2\nN: 300\nn: 120\n")
    out = tmp_path / "m.csv"
    assert main(["simulate", "--config", str(cfg), "--methods", "slr-true",
                 "--out", str(out)]) == 0
    row = next(csv.DictReader(out.open()))
    assert (row["scenario"], row["rho"], row["R"]) == ("2", "0.6", "2")
    meta = json.loads((tmp_path / "m.csv.meta.json").read_text())
    assert meta["N"] == 300 and meta["n"] == 120


@pytest.mark.parametrize("argv", [
    ["simulate", "--scenario", "1", "--replicates", "2"],
    ["simulate", "--scenario", "1", "--rho", "1.5", "--replicates", "2"],
    ["simulate", "--scenario", "1", "--rho", "0.8"],
    ["simulate", "--scenario", "1", "--rho", "0.8", "--replicates", "2", "--methods", "dml-x"],
])
def test_simulate_config_errors(tmp_path, capsys, argv):
    assert main(argv + ["--out", str(tmp_path / "m.csv")]) == 2
    assert capsys.readouterr().err.startswith("config error:")


def test_simulate_bad_config_keys(tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text("scenario: 1\nrho: 0.8\nR: 2\nbogus: 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "m.csv")]) == 2


@pytest.mark.parametrize("seed", ["-1", str(1 << 64), "abc"])
def test_seed_must_be_u64(tmp_path, seed):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--scenario", "1", "--rho", "0.8", "--replicates", "2",
              "--seed", seed, "--out", str(tmp_path / "m.csv")])
    assert exc.value.code == 2


# -- calibrate -----------------------------------------------------------------


def test_calibrate_writes_model(files):
    out = files / "cal.json"
    assert main(["calibrate", "--validation", str(files / "evs.csv"), "--schema",
                 str(files / "schema.yaml"), "--out", str(out)]) == 0
    model = json.loads(out.read_text())
    theta = np.asarray(model["theta"])
    assert theta.shape[0] == 2
    assert np.all(np.isfinite(theta))


def test_calibrate_missing_file(files, capsys):
    assert main(["calibrate", "--validation", str(files / "nope.csv"), "--schema",
                 str(files / "schema.yaml"), "--out", str(files / "c.json")]) == 3
    assert capsys.readouterr().err.startswith("data error:")


def test_calibrate_singular_design_is_numerical(files, capsys):
    _, evs = pipeline_tables(3, N=300, n=120)
    cols = dict(evs.columns)
    cols["B"] = cols["A"]
    write_csv(Table(cols, evs.categorical, evs.levels), files / "evs.csv")
    assert main(["calibrate", "--validation", str(files / "evs.csv"), "--schema",
                 str(files / "schema.yaml"), "--out", str(files / "c.json")]) == 4
    assert capsys.readouterr().err.startswith("numerical error:")


# -- analyze -------------------------------------------------------------------


def test_analyze_report(files):
    assert main(analyze_args(files, "--single-pollutant")) == 0
    report = json.loads((files / "report.json").read_text())
    schema = json.loads(resources.files("dmlrc").joinpath("schemas/report.schema.json")
                        .read_text())
    jsonschema.validate(report, schema)
    assert [c["name"] for c in report["constituents"]] == ["A", "B"]
    assert report["meta"]["seed"] == 11


def test_analyze_is_deterministic(files):
    main(analyze_args(files))
    first = (files / "report.json").read_bytes()
    main(analyze_args(files))
    assert (files / "report.json").read_bytes() == first
    main(analyze_args(files, seed="12"))
    assert (files / "report.json").read_bytes() != first


def test_analyze_missing_column(files, capsys):
    (files / "main.csv").write_text("id,y,A\nr0,1.0,2.0\n")
    assert main(analyze_args(files)) == 3
    assert capsys.readouterr().err.startswith("data error:")


def test_analyze_unknown_method(files):
    assert main(analyze_args(files, methods="ols-corrected")) == 2


def test_analyze_missing_schema(files):
    (files / "schema.yaml").unlink()
    assert main(analyze_args(files)) == 2


def test_analyze_partial_failure(files, monkeypatch):
    from dmlrc import pipeline

    real = pipeline._run_label

    def flaky(data, model, est, mode, variant, inter, focus, *rest):
        if est == "dml" and focus == 0:
            raise ConvergenceError("did not converge", iterations=5)
        return real(data, model, est, mode, variant, inter, focus, *rest)

    monkeypatch.setattr(pipeline, "_run_label", flaky)
    assert main(analyze_args(files)) == 5
    report = json.loads((files / "report.json").read_text())
    first, second = report["constituents"]
    assert "dml-corrected-multi-main" in first["failures"]
    assert "dml-corrected-multi-main" in second["results"]
