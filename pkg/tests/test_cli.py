import csv
import json
import math

import numpy as np
import pytest

from evppi.cli import main


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def gaussian(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    out = d / "psa.csv"
    assert main(["simulate", "gaussian", "--n", "1000", "--seed", "7", "--out", str(out)]) == 0
    return d, out


@pytest.fixture(scope="module")
def spde_report(gaussian):
    d, out = gaussian
    rep = d / "spde.json"
    assert main(["compute", str(out), "--method", "spde", "--poi", "theta1,theta2", "--out", str(rep)]) == 0
    return rep


class TestSimulate:
    def test_gaussian_rows_and_sidecar(self, gaussian):
        d, out = gaussian
        assert len(read_rows(out)) == 1000
        side = json.loads((d / "psa.json").read_text())
        assert side["n"] == 1000 and side["oracle"]["evpi"] > 0

    def test_bit_exact(self, gaussian, tmp_path):
        _, out = gaussian
        again = tmp_path / "again.csv"
        assert main(["simulate", "gaussian", "--n", "1000", "--seed", "7", "--out", str(again),
                     "--oracle-n", "1000"]) == 0
        assert again.read_bytes() == out.read_bytes()

    def test_influenza_columns(self, tmp_path):
        out = tmp_path / "flu.csv"
        assert main(["simulate", "influenza", "--n", "50", "--out", str(out)]) == 0
        header = out.read_text().splitlines()[0].split(",")
        assert header[-4:] == ["e0", "c0", "e1", "c1"]
        assert len(header) == 9

    def test_n_too_small(self, tmp_path, capsys):
        assert main(["simulate", "gaussian", "--n", "1", "--out", str(tmp_path / "x.csv")]) == 2
        assert "--n" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        assert main(["simulate", "influenza", "--n", "10", "--out", str(tmp_path / "no" / "x.csv")]) == 2


class TestCompute:
    def test_spde_report(self, spde_report, capsys):
        rep = json.loads(spde_report.read_text())
        assert rep["method"] == "spde" and rep["subset"] == ["theta1", "theta2"]
        # net-benefit columns are used as given, so no willingness to pay applies
        assert rep["value"] >= 0 and rep["wtp"] is None

    def test_summary_line(self, gaussian, tmp_path, capsys):
        _, out = gaussian
        rep = tmp_path / "gp.json"
        assert main(["compute", str(out), "--method", "gp", "--poi", "0", "--n-hyp", "200",
                     "--out", str(rep)]) == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith("evppi=") and "method=gp" in line and "seconds=" in line

    def test_unknown_column(self, gaussian, tmp_path, capsys):
        _, out = gaussian
        assert main(["compute", str(out), "--poi", "theta1,nosuch", "--out", str(tmp_path / "r.json")]) == 2
        assert "nosuch" in capsys.readouterr().err

    def test_mc_needs_spec(self, gaussian, tmp_path, capsys):
        _, out = gaussian
        assert main(["compute", str(out), "--method", "mc-single", "--out", str(tmp_path / "r.json")]) == 2
        assert "model-spec" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert main(["compute", str(tmp_path / "none.csv"), "--out", str(tmp_path / "r.json")]) == 2

    def test_round_trip(self, gaussian, tmp_path):
        d, _ = gaussian
        side = d / "psa.json"
        rep = tmp_path / "mc.json"
        assert main(["compute", str(side), "--method", "mc-single", "--n-draws", "200000", "--seed", "3",
                     "--out", str(rep)]) == 0
        oracle = json.loads(side.read_text())["oracle"]
        got = json.loads(rep.read_text())
        se = math.hypot(oracle["se"], got["monte_carlo"]["se"])
        assert abs(got["value"] - oracle["evpi"]) < 4 * se

    def test_mc_seed_is_bit_stable(self, gaussian, tmp_path):
        d, _ = gaussian
        vals = []
        for name in ("a.json", "b.json"):
            assert main(["compute", str(d / "psa.json"), "--method", "mc-nested", "--poi", "theta3",
                         "--s-phi", "50", "--s-psi", "50", "--seed", "4", "--out", str(tmp_path / name)]) == 0
            vals.append(json.loads((tmp_path / name).read_text())["value"])
        assert vals[0] == vals[1]


class TestDiagnose:
    def test_three_files(self, spde_report, tmp_path):
        assert main(["diagnose", str(spde_report), "--out", str(tmp_path)]) == 0
        for name in ("residuals.csv", "projection_mesh.csv", "grid.csv"):
            assert (tmp_path / name).exists()
        res = read_rows(tmp_path / "residuals.csv")
        assert len(res) == 2 * 1000
        weights = [float(r["weight"]) for r in read_rows(tmp_path / "grid.csv") if r["treatment"] == "1"]
        assert sum(weights) == pytest.approx(1.0)

    def test_mesh_vertex_count(self, spde_report, tmp_path):
        main(["diagnose", str(spde_report), "--out", str(tmp_path)])
        rep = json.loads(spde_report.read_text())
        rows = read_rows(tmp_path / "projection_mesh.csv")
        first = str(rep["mesh"]["treatment"])
        n = sum(1 for r in rows if r["kind"] == "vertex" and r["treatment"] == first)
        assert n == rep["mesh"]["vertices"]
        tri = np.array([[int(r["v1"]), int(r["v2"]), int(r["v3"])] for r in rows
                        if r["kind"] == "triangle" and r["treatment"] == first])
        assert tri.max() < n and len(tri) == rep["mesh"]["triangles"]

    def test_mc_report_rejected(self, gaussian, tmp_path, capsys):
        d, _ = gaussian
        rep = tmp_path / "mc.json"
        main(["compute", str(d / "psa.json"), "--method", "mc-single", "--n-draws", "1000", "--out", str(rep)])
        assert main(["diagnose", str(rep), "--out", str(tmp_path / "plots")]) == 2
        assert "no fitted surfaces" in capsys.readouterr().err
