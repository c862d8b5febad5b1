import csv
import dataclasses
import io
import json
import math
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hazrecal.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, fit_summary, main
from hazrecal.cox import fit_cox
from hazrecal.io import parse_cohort_csv, read_model

DATA = Path(__file__).parent / "data"

TOY = """id,entry_age,exit_age,event,x
a,0,1,1,0
b,0,2,1,1
c,0,3,0,0
d,0,4,1,1
e,0,5,0,1
f,0,6,1,0
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def read_csv(path):
    lines = [x for x in Path(path).read_text().splitlines() if not x.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture
def fitted(tmp_path):
    model = tmp_path / "model.json"
    code, _, err = run("fit", "--cohort", DATA / "a1c1_source.csv", "--out", model)
    assert code == EXIT_OK, err
    return model


@pytest.fixture
def recalibrated(tmp_path, fitted):
    out = tmp_path / "recal.json"
    code, _, err = run("recalibrate", "--cohort", DATA / "a1c1_source.csv", "--model", fitted,
                       "--summary", DATA / "a1c1_summary.json", "--out", out)
    assert code == EXIT_OK, err
    return out


class TestFit:
    def test_toy_roundtrip_17_digits(self, tmp_path):
        src = tmp_path / "toy.csv"
        src.write_text(TOY)
        model = tmp_path / "m.json"
        code, out, _ = run("fit", "--cohort", src, "--out", model)
        assert code == EXIT_OK and "x" in out
        fit = read_model(model)
        direct = fit_cox(parse_cohort_csv(TOY)[0])
        np.testing.assert_array_equal(fit.beta_hat, direct.beta_hat)
        np.testing.assert_array_equal(fit.sigma_beta, direct.sigma_beta)
        again = json.loads(json.dumps(fit.to_dict()))
        assert again == json.loads(model.read_text())["model"]

    def test_hazard_ratio_printout(self):
        fit = fit_cox(parse_cohort_csv(TOY)[0])
        fit = dataclasses.replace(fit, beta_hat=np.array([math.log(2)]))
        line = fit_summary(fit, 6, 4).splitlines()[-1]
        assert line.split()[-1] == "2.000"

    def test_missing_column(self, tmp_path):
        src = tmp_path / "bad.csv"
        src.write_text("id,exit_age,x\n1,2,0\n")
        code, _, err = run("fit", "--cohort", src, "--out", tmp_path / "m.json")
        assert code == EXIT_INPUT
        assert "event" in err and "line 1" in err

    def test_bad_number_names_line(self, tmp_path):
        src = tmp_path / "bad.csv"
        src.write_text("exit_age,event,x\n1,1,0\n2,1,oops\n")
        code, _, err = run("fit", "--cohort", src, "--out", tmp_path / "m.json")
        assert code == EXIT_INPUT and "line 3" in err and "'x'" in err

    def test_fit_error_is_input_error(self, tmp_path):
        src = tmp_path / "const.csv"
        src.write_text("exit_age,event,x\n1,1,1\n2,0,1\n3,1,1\n")
        code, _, err = run("fit", "--cohort", src, "--out", tmp_path / "m.json")
        assert code == EXIT_INPUT and err.startswith("error:")

    def test_missing_file(self, tmp_path):
        code, _, err = run("fit", "--cohort", tmp_path / "nope.csv", "--out", tmp_path / "m.json")
        assert code == EXIT_INPUT and "no such file" in err

    def test_usage_error(self):
        assert run("fit")[0] == EXIT_INPUT


class TestRecalibrate:
    def test_fixture_estimates(self, recalibrated):
        expected = json.loads((DATA / "a1c1_expected.json").read_text())
        res = json.loads(recalibrated.read_text())["results"]
        for mode in ("unweighted", "weighted"):
            np.testing.assert_allclose(res[mode]["lambda0"], expected[mode]["lambda0"], rtol=1e-10)
            np.testing.assert_allclose(res[mode]["se"], expected[mode]["se"], rtol=1e-8)

    def test_weighted_without_constraints_is_infeasible(self, tmp_path, fitted):
        summary = json.loads((DATA / "a1c1_summary.json").read_text())
        summary.pop("constraints")
        path = tmp_path / "s.json"
        path.write_text(json.dumps(summary))
        code, _, err = run("recalibrate", "--cohort", DATA / "a1c1_source.csv", "--model", fitted,
                           "--summary", path, "--mode", "weighted", "--out", tmp_path / "r.json")
        assert code == EXIT_INFEASIBLE and "constraints" in err

    def test_outside_hull_reports_direction(self, tmp_path, fitted):
        spec = {"items": [{"type": "raw_moment", "j": 1}], "targets": [1.5],
                "target_variances": [0.0]}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(spec))
        code, _, err = run("recalibrate", "--cohort", DATA / "a1c1_source.csv", "--model", fitted,
                           "--summary", DATA / "a1c1_summary.json", "--constraints", path,
                           "--mode", "weighted", "--out", tmp_path / "r.json")
        assert code == EXIT_INFEASIBLE and "direction" in err

    def test_ci_level_quantile(self, tmp_path, fitted):
        out = tmp_path / "r.json"
        code, text, _ = run("recalibrate", "--cohort", DATA / "a1c1_source.csv", "--model",
                            fitted, "--summary", DATA / "a1c1_summary.json", "--ci-level", "0.9",
                            "--mode", "unweighted", "--out", out)
        assert code == EXIT_OK and "z=1.6449" in text
        r = json.loads(out.read_text())["results"]["unweighted"]
        z = (np.array(r["ci_upper"]) - r["lambda0"]) / r["se"]
        np.testing.assert_allclose(z, 1.6448536269514722, rtol=1e-12)

    def test_tidy_csv_and_diag_note(self, tmp_path, fitted):
        tidy = tmp_path / "r.csv"
        code, text, _ = run("recalibrate", "--cohort", DATA / "a1c1_source.csv", "--model",
                            fitted, "--summary", DATA / "a1c1_summary.json", "--diag-approx",
                            "--out", tmp_path / "r.json", "--csv", tidy)
        assert code == EXIT_OK and "diagonal approximation" in text
        rows = read_csv(tidy)
        assert list(rows[0]) == ["time", "estimate", "se", "ci_lo", "ci_hi", "method"]
        assert {r["method"] for r in rows} == {"unweighted", "weighted"}

    def test_config_precedence(self, tmp_path, fitted):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"ci_level": 0.8, "mode": "unweighted"}))
        common = ["recalibrate", "--cohort", DATA / "a1c1_source.csv", "--model", fitted,
                  "--summary", DATA / "a1c1_summary.json", "--config", cfg]
        run(*common, "--out", tmp_path / "a.json")
        run(*common, "--ci-level", "0.9", "--out", tmp_path / "b.json")
        a = json.loads((tmp_path / "a.json").read_text())
        b = json.loads((tmp_path / "b.json").read_text())
        assert a["config"]["ci_level"] == 0.8 and list(a["results"]) == ["unweighted"]
        assert b["config"]["ci_level"] == 0.9
        assert a["config"]["isotonic"] is False

    def test_unknown_config_key(self, tmp_path, fitted):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"ci_levle": 0.8}))
        code, _, err = run("recalibrate", "--cohort", DATA / "a1c1_source.csv", "--model",
                           fitted, "--summary", DATA / "a1c1_summary.json", "--config", cfg,
                           "--out", tmp_path / "r.json")
        assert code == EXIT_INPUT and "ci_levle" in err


class TestPredict:
    def subjects(self, tmp_path, rows, header="id,z1,z2"):
        path = tmp_path / "subjects.csv"
        path.write_text(header + "\n" + "\n".join(rows) + "\n")
        return path

    def test_zero_profile_is_baseline_sum(self, tmp_path, fitted, recalibrated):
        subj = self.subjects(tmp_path, ["s1,0,0"])
        out = tmp_path / "p.csv"
        code, _, err = run("predict", "--model", fitted, "--baseline", recalibrated,
                           "--subjects", subj, "--t0", 0, "--t1", 60, "--out", out)
        assert code == EXIT_OK, err
        lam = json.loads(recalibrated.read_text())["results"]["weighted"]["lambda0"]
        jumps = np.diff(np.concatenate(([0.0], lam)))
        expected = jumps @ np.exp(-np.concatenate(([0.0], lam[:-1])))
        row = read_csv(out)[0]
        assert float(row["risk"]) == pytest.approx(expected, rel=1e-14)
        assert list(row) == ["id", "t0", "t1", "risk", "se", "ci_lo", "ci_hi"]

    def test_duplicate_rows_identical(self, tmp_path, fitted, recalibrated):
        subj = self.subjects(tmp_path, ["a,1,0.5", "b,1,0.5", "c,0,-1", "d,1,0.5"])
        out = tmp_path / "p.csv"
        run("predict", "--model", fitted, "--baseline", recalibrated, "--subjects", subj,
            "--t0", 10, "--t1", 60, "--out", out)
        rows = read_csv(out)
        strip = [{k: v for k, v in r.items() if k != "id"} for r in rows]
        assert strip[0] == strip[1] == strip[3] != strip[2]

    def test_covariate_mismatch(self, tmp_path, fitted, recalibrated):
        subj = self.subjects(tmp_path, ["a,1,0.5"], header="id,z1,age")
        code, _, err = run("predict", "--model", fitted, "--baseline", recalibrated,
                           "--subjects", subj, "--t0", 0, "--t1", 60, "--out", tmp_path / "p.csv")
        assert code == EXIT_INPUT and "z2" in err

    def test_competing_hazard_lowers_risk(self, tmp_path, fitted, recalibrated):
        subj = self.subjects(tmp_path, ["a,1,0.5"])
        comp = tmp_path / "comp.json"
        comp.write_text(json.dumps({"knots": [20, 40, 60], "values": [0.1, 0.3, 0.6],
                                    "variance": [1e-4, 2e-4, 3e-4]}))
        base, with_c = tmp_path / "a.csv", tmp_path / "b.csv"
        common = ["predict", "--model", fitted, "--baseline", recalibrated, "--subjects", subj,
                  "--t0", 0, "--t1", 60]
        assert run(*common, "--out", base)[0] == EXIT_OK
        assert run(*common, "--competing", comp, "--out", with_c)[0] == EXIT_OK
        assert float(read_csv(with_c)[0]["risk"]) < float(read_csv(base)[0]["risk"])

    def test_ten_thousand_subjects_fast(self, tmp_path, fitted, recalibrated):
        rng = np.random.default_rng(0)
        rows = [f"s{i},{int(a)},{float(b)!r}" for i, (a, b) in
                enumerate(zip(rng.integers(0, 2, 10_000), rng.normal(size=10_000)))]
        subj = self.subjects(tmp_path, rows)
        out = tmp_path / "p.csv"
        start = time.perf_counter()
        code, _, _ = run("predict", "--model", fitted, "--baseline", recalibrated,
                         "--subjects", subj, "--t0", 0, "--t1", 60, "--out", out)
        assert code == EXIT_OK and time.perf_counter() - start < 5.0
        assert len(read_csv(out)) == 10_000


class TestSimulate:
    ARGS = ["simulate", "--replicates", 3, "--n", 200, "--m", 2000, "--seed", 5,
            "--estimators", "unweighted,weighted1"]

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(*self.ARGS, "--out", a)[0] == EXIT_OK
        assert run(*self.ARGS, "--out", b)[0] == EXIT_OK
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text().startswith("# config: ")

    def test_unknown_estimator(self, tmp_path):
        code, _, err = run("simulate", "--estimators", "nonsense", "--out", tmp_path / "x.csv")
        assert code == EXIT_INPUT and "nonsense" in err


def test_console_entry_point(tmp_path):
    exe = shutil.which("hazrecal")
    cmd = [exe] if exe else [sys.executable, "-m", "hazrecal.cli"]
    proc = subprocess.run(cmd + ["fit", "--cohort", str(tmp_path / "missing.csv"),
                                 "--out", str(tmp_path / "m.json")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_INPUT
    help_ = subprocess.run(cmd + ["predict", "--help"], capture_output=True, text=True)
    assert help_.returncode == 0 and "--subjects" in help_.stdout
