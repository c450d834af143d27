"""Command-line interface: exports, validation, benchmarking."""

import csv
import io
import json

import numpy as np
import pytest

from rfswarm.cli import (
    RunManifest,
    cmd_bench,
    cmd_run,
    cmd_validate,
    main,
    snapshot_svg,
    trajectory_csv,
)
from rfswarm.swarmsim import Scenario, run_scenario

from test_swarmsim import tiny_scenario


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_scenario()), encoding="utf-8")
    return path


class TestCmdRun:
    def test_writes_three_artifacts(self, scenario_file, tmp_path):
        out = tmp_path / "out"
        code = cmd_run(RunManifest(str(scenario_file), str(out)))
        assert code == 0
        files = sorted(p.name for p in out.iterdir())
        assert files == ["diagnostics.json", "snapshots.svg", "trajectory.csv"]

    def test_missing_dt_exits_one_naming_field(self, tmp_path, capsys):
        data = tiny_scenario()
        del data["model"]["dt"]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(data), encoding="utf-8")
        code = cmd_run(RunManifest(str(bad), str(tmp_path / "out")))
        assert code == 1
        assert "dt" in capsys.readouterr().err

    def test_format_subset(self, scenario_file, tmp_path):
        out = tmp_path / "out"
        code = cmd_run(RunManifest(str(scenario_file), str(out), formats=("csv",)))
        assert code == 0
        assert [p.name for p in out.iterdir()] == ["trajectory.csv"]

    def test_empty_formats_rejected(self, scenario_file, tmp_path):
        with pytest.raises(ValueError):
            RunManifest(str(scenario_file), str(tmp_path), formats=())

    def test_main_entry(self, scenario_file, tmp_path):
        out = tmp_path / "cli_out"
        code = main(["run", str(scenario_file), "--out", str(out), "--format", "csv,json"])
        assert code == 0
        assert (out / "trajectory.csv").exists()
        assert (out / "diagnostics.json").exists()


class TestCmdValidate:
    def test_valid_file(self, scenario_file):
        assert cmd_validate(str(scenario_file)) == 0

    def test_non_spd_covariance_names_component(self, tmp_path, capsys):
        data = tiny_scenario()
        data["initial"]["covariances"] = [np.eye(4).tolist(), (-np.eye(4)).tolist()]
        path = tmp_path / "bad_cov.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        assert cmd_validate(str(path)) == 1
        assert "covariances[1]" in capsys.readouterr().err

    def test_negative_alpha_named(self, tmp_path, capsys):
        data = tiny_scenario()
        data["distance"]["alpha"] = -2.0
        path = tmp_path / "bad_alpha.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        assert cmd_validate(str(path)) == 1
        assert "alpha" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert cmd_validate("/nonexistent/path.json") == 1


class TestCsvContract:
    def test_header_and_round_trip(self):
        log = run_scenario(Scenario.from_dict(tiny_scenario()))
        text = trajectory_csv(log)
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["step", "t", "entity_kind", "entity_id",
                           "x", "y", "vx", "vy", "weight"]
        # Nine-significant-digit floats reparse and reformat identically.
        for row in rows[1:50]:
            for cell in row[4:8]:
                if cell:
                    assert f"{float(cell):.9g}" == cell

    def test_deterministic_export(self):
        scn = Scenario.from_dict(tiny_scenario())
        a = trajectory_csv(run_scenario(scn))
        b = trajectory_csv(run_scenario(scn))
        assert a == b


class TestSvgContract:
    def test_byte_identical_for_identical_logs(self):
        scn = Scenario.from_dict(tiny_scenario())
        log1 = run_scenario(scn)
        log2 = run_scenario(scn)
        svg1 = snapshot_svg(log1, [0.0, 0.05])
        svg2 = snapshot_svg(log2, [0.0, 0.05])
        assert svg1 == svg2
        assert svg1.startswith("<svg")

    def test_panels_match_requested_times(self):
        log = run_scenario(Scenario.from_dict(tiny_scenario()))
        svg = snapshot_svg(log, [0.0, 0.03, 0.08])
        assert svg.count("<text") == 3


class TestCmdBench:
    def test_table_shape_and_determinism(self, scenario_file, tmp_path, capsys):
        out_csv = tmp_path / "bench.csv"
        code = cmd_bench([str(scenario_file)], str(out_csv))
        assert code == 0
        rows = list(csv.reader(io.StringIO(out_csv.read_text(encoding="utf-8"))))
        assert rows[0][:2] == ["scenario", "controller"]
        assert len(rows) == 3  # header + ilqr + mpc
        assert {r[1] for r in rows[1:]} == {"ilqr", "mpc"}
        costs_first = [r[3] for r in rows[1:]]

        capsys.readouterr()
        cmd_bench([str(scenario_file)], str(out_csv))
        rows2 = list(csv.reader(io.StringIO(out_csv.read_text(encoding="utf-8"))))
        assert [r[3] for r in rows2[1:]] == costs_first
