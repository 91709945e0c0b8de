import json

import numpy as np
import pytest

import gddp
from gddp.cli import dispatch

from conftest import make_scalar_lqr


@pytest.fixture
def lqr_file(tmp_path):
    path = tmp_path / "lqr1.json"
    gddp.save_problem(make_scalar_lqr(), path)
    return path


class TestValidate:
    def test_accept(self, lqr_file, capsys, tmp_path):
        code = dispatch(["validate", "--problem", str(lqr_file), "--out", str(tmp_path / "out")])
        assert code == 0
        assert "ACCEPT ConvexQuadratic" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, capsys):
        code = dispatch(["validate", "--problem", str(tmp_path / "nope.json")])
        assert code == 1

    def test_malformed_json_reports_offset(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"n": 1, "m": }')
        code = dispatch(["validate", "--problem", str(bad)])
        assert code == 1
        err = capsys.readouterr().err
        assert "byte offset" in err
        assert "14" in err  # the offending position

    def test_unknown_flag_rejected(self, lqr_file, capsys):
        code = dispatch(["validate", "--problem", str(lqr_file), "--frobnicate"])
        assert code == 1


class TestRun:
    def test_end_to_end(self, lqr_file, tmp_path, capsys):
        out = tmp_path / "out"
        code = dispatch(
            [
                "run",
                "--problem",
                str(lqr_file),
                "--out",
                str(out),
                "--delta",
                "1e-3",
                "--picker",
                "max-error",
                "--num-samples",
                "3",
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "converged=True" in stdout
        trace = (out / "run_trace.csv").read_text()
        header = trace.splitlines()[0]
        assert header == "iteration,picked_index,J_P,duality_gap,max_bellman_error,wall_ms"
        final_eps = float(stdout.split("max_eps=")[1].split()[0])
        assert final_eps <= 1e-3

    def test_byte_identical_reruns(self, lqr_file, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert dispatch(["run", "--problem", str(lqr_file), "--out", str(out), "--num-samples", "3"]) == 0
        assert (out_a / "run_trace.csv").read_bytes() == (out_b / "run_trace.csv").read_bytes()

    def test_timings_flag_changes_artifact(self, lqr_file, tmp_path):
        out = tmp_path / "t"
        assert dispatch(
            ["run", "--problem", str(lqr_file), "--out", str(out), "--num-samples", "2", "--timings"]
        ) == 0
        text = (out / "run_trace.csv").read_text()
        wall_values = [line.rsplit(",", 1)[1] for line in text.splitlines()[1:]]
        assert any(v != "0.0" for v in wall_values)


class TestCertify:
    def test_writes_certificates(self, lqr_file, tmp_path):
        out = tmp_path / "out"
        code = dispatch(
            [
                "certify",
                "--problem",
                str(lqr_file),
                "--out",
                str(out),
                "--num-samples",
                "3",
                "--cert-samples",
                "4",
                "--sample-stddev",
                "2.0",
            ]
        )
        assert code == 0
        certs = json.loads((out / "certificates.json").read_text())
        assert len(certs) == 4
        for cert in certs:
            assert cert["lower"] <= cert["upper"]
            assert cert["method"] == "M1"


class TestBenchCommands:
    def test_bench_iterations_csv(self, tmp_path):
        out = tmp_path / "out"
        code = dispatch(
            ["bench-iterations", "--dims", "1x1", "--M", "1,2", "--out", str(out), "--seed", "0"]
        )
        assert code == 0
        text = (out / "iterations.csv").read_text()
        rows = gddp.bench.csv_to_rows(text)
        assert [int(r["M"]) for r in rows] == [1, 2]
        assert all(r["wall_seconds"] == "0.0" for r in rows)  # timings off by default

    def test_bench_iterations_json_format(self, tmp_path):
        out = tmp_path / "out"
        code = dispatch(
            ["bench-iterations", "--dims", "1x1", "--M", "1", "--out", str(out), "--format", "json"]
        )
        assert code == 0
        rows = json.loads((out / "iterations.json").read_text())
        assert rows[0]["n"] == 1

    def test_value_iteration_binary(self, lqr_file, tmp_path):
        out = tmp_path / "out"
        # gamma=1 problem would still run; use a quick small grid
        code = dispatch(
            [
                "value-iteration",
                "--problem",
                str(lqr_file),
                "--out",
                str(out),
                "--box=-5,5",
                "--state-pts",
                "21",
                "--input-pts",
                "5",
                "--stop-tol",
                "1e-2",
            ]
        )
        assert code == 0
        gvf = gddp.load_grid_value_function(out / "grid_values.bin")
        assert gvf.counts.tolist() == [21]

    def test_value_iteration_rejects_big_n(self, tmp_path):
        spec = gddp.generate_random_system(gddp.RandomSystemConfig(n=4, m=1, seed=0))
        path = tmp_path / "big.json"
        gddp.save_problem(spec, path)
        code = dispatch(["value-iteration", "--problem", str(path), "--out", str(tmp_path / "o")])
        assert code == 1
