import csv
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from gmfm.cli import main
from gmfm.evalsim import SimulationSpec, ccor, simulate_case
from gmfm.evalsim.bench import fit_gmfm
from gmfm.io import BundleError, fit_schema, read_bundle, read_fit, read_truth, write_bundle
from gmfm.model import FamilyBlock, FamilyMap, MatrixSeries, natural_params, total_loglik
from gmfm.families import FamilyKind


@pytest.fixture
def case1_bundle(tmp_path):
    out = tmp_path / "case1"
    assert main(["simulate", "--case", "1", "--p1", "20", "--p2", "20", "--T", "30", "--seed", "1", "--out", str(out)]) == 0
    return out


def _meta(path):
    return json.loads((path / "meta.json").read_text())


def test_bundle_round_trip(tmp_path, rng):
    fm = FamilyMap(FamilyKind.GAUSSIAN, (FamilyBlock(FamilyKind.POISSON, cols=(3, 4)),))
    vals = rng.normal(size=(3, 4, 4))
    vals[:, :, 2:] = rng.poisson(2.0, size=(3, 4, 2))
    mask = np.ones(vals.shape, bool)
    mask[1, 2, 0] = False
    X = MatrixSeries(vals, mask)
    write_bundle(tmp_path / "b", X, fm, {"k1": 1})
    Y, fm2, meta = read_bundle(tmp_path / "b")
    assert fm2 == fm and meta["k1"] == 1
    assert not Y.observed[1, 2, 0] and Y.observed.sum() == mask.sum()
    np.testing.assert_array_equal(Y.values[mask], vals[mask])


def test_simulate_writes_rows_and_truth(case1_bundle):
    with (case1_bundle / "data.csv").open() as fh:
        assert sum(1 for _ in fh) == 12000 + 1
    theta0, info = read_truth(case1_bundle / "truth.json")
    assert info["innovation_scale"] == 0.2
    d = simulate_case(SimulationSpec("case1", 20, 20, 30, seed=1))
    np.testing.assert_array_equal(theta0.R, d.theta0.R)


@pytest.mark.parametrize(
    "edit, field",
    [
        (lambda m: m.pop("p2"), "p2"),
        (lambda m: m.update(T="thirty"), "T"),
        (lambda m: m.update(k1=0), "k1"),
        (lambda m: m.update(default_family="gamma"), "default_family"),
        (lambda m: m.update(family_blocks=[{"family": "logit", "cols": [3, 99]}]), "family_blocks"),
    ],
)
def test_meta_errors_name_the_field(case1_bundle, edit, field, capsys):
    meta = _meta(case1_bundle)
    edit(meta)
    (case1_bundle / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(BundleError, match=field):
        read_bundle(case1_bundle)
    assert main(["fit", "--data", str(case1_bundle), "--k1", "1", "--k2", "1"]) == 2
    assert field in capsys.readouterr().err


def test_data_errors(tmp_path, case1_bundle, capsys):
    lines = (case1_bundle / "data.csv").read_text().splitlines()
    (case1_bundle / "data.csv").write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(BundleError, match="duplicate"):
        read_bundle(case1_bundle)
    (case1_bundle / "data.csv").write_text("\n".join(lines[:1] + ["1,1,99,0.5"]) + "\n")
    with pytest.raises(BundleError, match="outside"):
        read_bundle(case1_bundle)
    # poisson support is checked against the family map
    meta = _meta(case1_bundle)
    meta["default_family"] = "poisson"
    (case1_bundle / "meta.json").write_text(json.dumps(meta))
    (case1_bundle / "data.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(BundleError, match="data.csv"):
        read_bundle(case1_bundle)
    (case1_bundle / "data.csv").unlink()
    assert main(["fit", "--data", str(case1_bundle), "--k1", "1", "--k2", "1"]) == 2
    assert "data.csv" in capsys.readouterr().err


def test_fit_schema_and_loglik(case1_bundle, tmp_path, capsys):
    out = tmp_path / "f.json"
    code = main(["fit", "--data", str(case1_bundle), "--k1", "2", "--k2", "2", "--algo", "tsam", "--seed", "7",
                 "--restarts", "2", "--with-se", "--out", str(out)])
    assert code == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("loglik=") and "converged=" in line and "max_residual=" in line
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, fit_schema())
    theta, report, _ = read_fit(out)
    X, fm, _ = read_bundle(case1_bundle)
    assert total_loglik(X, fm, theta) == pytest.approx(report.loglik, abs=1e-8)
    assert set(doc["variances"]) == {"row", "col", "factor"}
    # same fit in process with the same seeds
    th2, _ = fit_gmfm(X, fm, 2, 2, "tsam", {"seed": 7, "restarts": 2})
    truth, _ = read_truth(case1_bundle / "truth.json")
    assert main(["report", "--fit", str(out), "--data", str(case1_bundle), "--truth", str(case1_bundle / "truth.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["loglik_recomputed"] == pytest.approx(report.loglik, abs=1e-8)
    assert rep["ccorR"] == pytest.approx(ccor(th2.R, truth.R), abs=1e-12)
    assert rep["ccorC"] == pytest.approx(ccor(th2.C, truth.C), abs=1e-12)


def test_mm_and_tsam_agree_on_gaussian(tmp_path):
    out = tmp_path / "g"
    main(["simulate", "--case", "1", "--p1", "12", "--p2", "10", "--T", "15", "--seed", "2", "--innovation-scale", "1.0", "--out", str(out)])
    fa, fb = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["fit", "--data", str(out), "--k1", "2", "--k2", "2", "--algo", "mm", "--inner-exact", "--error-tol", "1e-10", "--out", str(fa)]) == 0
    assert main(["fit", "--data", str(out), "--k1", "2", "--k2", "2", "--algo", "tsam", "--tol", "1e-12", "--out", str(fb)]) == 0
    a, b = read_fit(fa)[0], read_fit(fb)[0]
    assert np.sqrt(np.mean((natural_params(a) - natural_params(b)) ** 2)) < 1e-3


def test_select_csv(tmp_path, capsys, caplog):
    out = tmp_path / "s"
    main(["simulate", "--case", "1", "--p1", "12", "--p2", "12", "--T", "15", "--seed", "3", "--out", str(out)])
    crit = tmp_path / "criterion.csv"
    assert main(["select", "--data", str(out), "--max-k1", "3", "--max-k2", "2", "--restarts", "1", "--tol", "1e-4", "--out", str(crit)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("k1=")
    with crit.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert list(rows[0]) == ["l1", "l2", "negloglik_scaled", "penalty", "criterion"]
    assert main(["select", "--data", str(out), "--max-k1", "1", "--max-k2", "1", "--restarts", "1", "--out", str(crit)]) == 0
    assert "k1=1 k2=1" in capsys.readouterr().out
    assert any("boundary" in r.getMessage() for r in caplog.records)
    assert main(["select", "--data", str(out), "--max-k1", "20", "--out", str(crit)]) == 2


def test_bench_counts(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--cases", "1,3", "--dims", "10x10x8", "--reps", "3", "--restarts", "1", "--out", str(out)]) == 0
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == "case,p1,p2,T,rep,method,ccorR,ccorC,seconds".split(",")
    assert sum(r["method"].startswith("gmfm") for r in rows) == 2 * 3
    assert sum(r["method"] == "alpha-pca" for r in rows) == 2 * 3
    assert main(["bench", "--cases", "9", "--reps", "1", "--out", str(out)]) == 2


def test_validate_period_count(tmp_path, capsys):
    out = tmp_path / "roll.json"
    code = main(["validate", "--window", "5", "--k", "3", "--periods", "3", "--quarters", "2", "--p1", "8", "--p2", "8",
                 "--restarts", "1", "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert len(doc["periods"]) == 3 and doc["periods"][0]["period"] == 6
    assert main(["validate", "--window", "5", "--p1", "8", "--p2", "8"]) == 2


def test_invalid_case_and_module_entry(tmp_path):
    assert main(["simulate", "--case", "7", "--p1", "5", "--p2", "5", "--T", "3", "--out", str(tmp_path / "x")]) == 2
    proc = subprocess.run([sys.executable, "-m", "gmfm", "fit", "--data", str(tmp_path / "nope"), "--k1", "1", "--k2", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "nope" in proc.stderr


def test_jobs_deterministic_across_workers(case1_bundle):
    X, fm, _ = read_bundle(case1_bundle)
    a, _ = fit_gmfm(X, fm, 2, 2, "tsam", {"restarts": 2, "jobs": 1})
    b, _ = fit_gmfm(X, fm, 2, 2, "tsam", {"restarts": 2, "jobs": 2})
    np.testing.assert_allclose(natural_params(a), natural_params(b), atol=1e-9)
