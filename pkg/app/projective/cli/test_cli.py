import csv
import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from app.projective.cli.main import cli
from app.projective.cli.reports import CSV_HEADER, CheckRecord, ConfigEcho, SuiteReport, parse_report, report_to_json
from app.projective.cli.suites import parse_metric_spec, run_suite
from app.projective.core.errors import ReportIOError, UsageError
from app.projective.core.utilities import VerificationConfig, load_projective_config


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def small_config(tmp_path):
    # Configurazione ridotta: stessi passi, griglie e campioni più piccoli.
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"grid": 11, "interior_grid": 9, "steps": 200}), encoding="utf-8")
    return str(path)


@pytest.fixture
def suite_config():
    # Campioni e risoluzioni ridotti: ogni suite gira per intero in pochi secondi.
    return VerificationConfig(grid=11, interior_grid=9, shift_samples=1, shift_geodesics=2, shift_steps=200,
                              beltrami_samples=1, beltrami_geodesics=2, beltrami_steps=200, structure_corpora=1,
                              rank_samples=1, sphere_resolution=(40, 20), torus_resolution=16)


def sample_report(passed: bool) -> SuiteReport:
    echo = ConfigEcho(model="default", h=1e-5, dt=1e-3, grid=41, seed=42, tol=1e-5, steps=10000)
    records = [CheckRecord(name="jets.homomorphism", residual=1e-12, tolerance=1e-9, passed=True),
               CheckRecord(name="jets.closure", residual=2e-3 if not passed else 0.0, tolerance=1e-12, passed=passed)]
    return SuiteReport(suite="jets", config=echo, records=records)


def read_blocks(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    blocks = {}
    for row in rows[1:]:
        blocks.setdefault(int(row[0]), []).append([float(value) for value in row[4:7]])
    return rows[0], {key: np.array(points) for key, points in blocks.items()}


# ---------------------------
# verify
# ---------------------------

class TestVerify:
    def test_jets_suite_passes(self, runner, small_config, tmp_path):
        out = tmp_path / "jets.json"
        result = runner.invoke(cli, ["--config", small_config, "verify", "jets", "--out", str(out)])
        assert result.exit_code == 0
        data = json.loads(out.read_text(encoding="utf-8"))
        assert data["suite"] == "jets"
        assert data["passed"] is True
        assert data["config"]["seed"] == 42
        assert {record["name"] for record in data["records"]} == {"jets.homomorphism", "jets.closure", "jets.fd_oracle"}
        assert all("runtime_ms" not in record for record in data["records"])

    def test_report_is_deterministic(self, runner, small_config, tmp_path):
        first, second = tmp_path / "first.json", tmp_path / "second.json"
        for out in (first, second):
            result = runner.invoke(cli, ["--config", small_config, "verify", "jets", "--seed", "7", "--out", str(out)])
            assert result.exit_code in (0, 1)
        assert first.read_bytes() == second.read_bytes()

    def test_csv_format(self, runner, small_config, tmp_path):
        out = tmp_path / "jets.csv"
        result = runner.invoke(cli, ["--config", small_config, "verify", "jets", "--format", "csv", "--out", str(out)])
        assert result.exit_code == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert len(lines) == 4
        assert all(line.startswith("jets,jets.") and line.endswith(",true,") for line in lines[1:])

    def test_timings_are_recorded_on_request(self, runner, small_config, tmp_path):
        out = tmp_path / "timed.json"
        runner.invoke(cli, ["--config", small_config, "verify", "jets", "--timings", "--out", str(out)])
        data = json.loads(out.read_text(encoding="utf-8"))
        assert all(record["runtime_ms"] >= 0.0 for record in data["records"])

    def test_unknown_suite(self, runner):
        assert runner.invoke(cli, ["verify", "curvature"]).exit_code == 2

    def test_unknown_model(self, runner):
        assert runner.invoke(cli, ["verify", "jets", "--model", "hyperbolic"]).exit_code == 2

    def test_unwritable_output(self, runner, small_config, tmp_path):
        out = tmp_path / "missing" / "report.json"
        assert runner.invoke(cli, ["--config", small_config, "verify", "jets", "--out", str(out)]).exit_code == 3

    def test_config_echo_reproduces_run(self, runner, small_config, tmp_path):
        out = tmp_path / "jets.json"
        runner.invoke(cli, ["--config", small_config, "verify", "jets", "--grid", "13", "--out", str(out)])
        report = parse_report(out.read_text(encoding="utf-8"))
        assert report.schema_version == "2"
        assert report.config.interior_grid == 9
        assert report.config.h_gamma == 1e-4
        expected = load_projective_config(small_config).model_copy(update={"grid": 13})
        assert report.config.to_config().model_dump() == expected.model_dump()

        replay, copy = tmp_path / "replay.json", tmp_path / "copy.json"
        replay.write_text(report.config.to_config().model_dump_json(), encoding="utf-8")
        runner.invoke(cli, ["--config", str(replay), "verify", "jets", "--out", str(copy)])
        assert copy.read_bytes() == out.read_bytes()

    def test_failing_check_exits_one(self, runner, monkeypatch, tmp_path):
        monkeypatch.setattr("app.projective.cli.main.run_suite", lambda *args: sample_report(False))
        out = tmp_path / "failed.json"
        result = runner.invoke(cli, ["verify", "jets", "--out", str(out)])
        assert result.exit_code == 1
        assert json.loads(out.read_text(encoding="utf-8"))["passed"] is False

    @pytest.mark.parametrize("override", ["--grid=1", "--h=0", "--tol=-1e-5", "--seed=-3"])
    def test_invalid_override(self, runner, override, tmp_path):
        result = runner.invoke(cli, ["verify", "jets", override, "--out", str(tmp_path / "x.json")])
        assert result.exit_code == 2
        assert not (tmp_path / "x.json").exists()

    def test_dt_is_not_a_verify_option(self, runner):
        assert runner.invoke(cli, ["verify", "jets", "--dt", "1e-3"]).exit_code == 2

    def test_invalid_config_file(self, runner, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"hodge_sign": 2}), encoding="utf-8")
        assert runner.invoke(cli, ["--config", str(path), "verify", "jets"]).exit_code == 2


class TestRunSuite:
    def test_unknown_suite(self):
        with pytest.raises(UsageError):
            run_suite("curvature", load_projective_config())

    def test_incompatible_model(self):
        with pytest.raises(UsageError):
            run_suite("beltrami", load_projective_config(), "torus")

    @pytest.mark.parametrize("suite, names", [
        ("structure", {"structure.reference.w", "structure.corpus0.w_agreement", "structure.gauge.omega1_scaling"}),
        ("projective", {"projective.weyl_criterion.shift", "projective.shares.plane.failures",
                        "projective.shares.sphere.failures", "projective.shares.sphere.max_distance",
                        "projective.shares.negative"}),
        ("beltrami", {"beltrami.planarity.failures", "beltrami.family.rank_identity",
                      "beltrami.transition.christoffel"}),
        ("degree", {"degree.sphere.raw", "degree.sphere.area_convergence", "degree.sphere.beta_spread",
                    "degree.torus.g1.raw", "degree.torus.g2.raw"}),
        ("uniqueness", {"uniqueness.torus.f_value", "uniqueness.beltrami.precondition_flagged",
                        "uniqueness.kernel.trivial"}),
    ])
    def test_suite_runs_end_to_end(self, suite_config, suite, names):
        report = run_suite(suite, suite_config)
        recorded = {record.name for record in report.records}
        assert names <= recorded
        assert all(name.startswith(suite + ".") for name in recorded)
        assert report.config.to_config().model_dump() == suite_config.model_dump()

    def test_exact_checks_pass(self, suite_config):
        records = {record.name: record for record in run_suite("projective", suite_config).records}
        for name in ("projective.weyl_criterion.shift", "projective.decomposition"):
            assert records[name].passed
        records = {record.name: record for record in run_suite("uniqueness", suite_config).records}
        for name in ("uniqueness.torus.f_value", "uniqueness.torus.same_connection",
                     "uniqueness.beltrami.precondition_flagged"):
            assert records[name].passed

    def test_projective_on_single_surface(self, suite_config):
        names = {record.name for record in run_suite("projective", suite_config, "plane").records}
        assert "projective.shares.plane.failures" in names
        assert not any(name.startswith("projective.shares.sphere") for name in names)
        assert "projective.shares.negative" not in names

    def test_projective_rejects_torus(self, suite_config):
        with pytest.raises(UsageError):
            run_suite("projective", suite_config, "torus")

    @pytest.mark.slow
    def test_projective_with_default_config(self):
        # Configurazione di pacchetto con meno campioni: stesse carte, passi e soglie.
        config = load_projective_config().model_copy(update={"shift_samples": 2})
        records = {record.name: record for record in run_suite("projective", config, "sphere").records}
        assert {"projective.shares.sphere.failures", "projective.shares.sphere.max_distance",
                "projective.shares.negative"} <= set(records)
        assert not any(math.isnan(record.residual) for record in records.values())


# ---------------------------
# report
# ---------------------------

class TestReportCommand:
    def test_json_to_csv(self, runner, tmp_path):
        source, out = tmp_path / "report.json", tmp_path / "report.csv"
        source.write_text(report_to_json(sample_report(True)), encoding="utf-8")
        result = runner.invoke(cli, ["report", str(source), "--out", str(out)])
        assert result.exit_code == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "suite,check,residual,tolerance,passed,runtime_ms"
        assert lines[1] == "jets,jets.homomorphism,9.9999999999999998e-13,1.0000000000000001e-09,true,"

    def test_failing_record(self, runner, tmp_path):
        source, out = tmp_path / "report.json", tmp_path / "report.csv"
        source.write_text(report_to_json(sample_report(False)), encoding="utf-8")
        result = runner.invoke(cli, ["report", str(source), "--out", str(out)])
        assert result.exit_code == 1
        assert out.read_text(encoding="utf-8").splitlines()[2].endswith(",false,")

    def test_json_roundtrip(self, runner, tmp_path):
        source, out = tmp_path / "report.json", tmp_path / "copy.json"
        text = report_to_json(sample_report(True))
        source.write_text(text, encoding="utf-8")
        assert runner.invoke(cli, ["report", str(source), "--format", "json", "--out", str(out)]).exit_code == 0
        assert out.read_text(encoding="utf-8") == text

    def test_missing_source(self, runner, tmp_path):
        assert runner.invoke(cli, ["report", str(tmp_path / "absent.json")]).exit_code == 3

    def test_malformed_source(self):
        with pytest.raises(ReportIOError):
            parse_report("{not json")

    def test_non_finite_residual(self):
        report = sample_report(False)
        report.records[1].residual = float("inf")
        text = report_to_json(report)
        assert '"residual": "inf"' in text
        assert parse_report(text).records[1].residual == float("inf")


# ---------------------------
# geodesics
# ---------------------------

class TestGeodesicsCommand:
    def test_equator(self, runner, tmp_path):
        out = tmp_path / "equator.csv"
        result = runner.invoke(cli, ["geodesics", "--model", "sphere", "--metric", "round", "--ic", "1,0,0,1",
                                     "--steps", "500", "--dt", "1e-3", "--out", str(out)])
        assert result.exit_code == 0
        header, blocks = read_blocks(out)
        assert header == ["geodesic", "chart_id", "u", "v", "x", "y", "z"]
        assert len(blocks[0]) == 501
        assert np.max(np.abs(blocks[0][:, 2])) < 1e-9

    def test_without_initial_conditions(self, runner, tmp_path):
        out = tmp_path / "empty.csv"
        assert runner.invoke(cli, ["geodesics", "--out", str(out)]).exit_code == 0
        assert out.read_text(encoding="utf-8") == "geodesic,chart_id,u,v,x,y,z\n"

    def test_beltrami_blocks_are_planar(self, runner, tmp_path):
        out = tmp_path / "beltrami.csv"
        result = runner.invoke(cli, ["geodesics", "--model", "sphere", "--metric", "beltrami:2,1,0.5",
                                     "--random", "5", "--seed", "3", "--steps", "500", "--dt", "2e-3",
                                     "--out", str(out)])
        assert result.exit_code == 0
        _, blocks = read_blocks(out)
        assert sorted(blocks) == [0, 1, 2, 3, 4]
        for points in blocks.values():
            sigma = np.linalg.svd(points, compute_uv=False)
            assert sigma[2] / sigma[0] < 1e-6

    def test_torus_pair(self, runner, tmp_path):
        out = tmp_path / "torus.csv"
        result = runner.invoke(cli, ["geodesics", "--model", "torus", "--metric", "g2", "--ic", "0.5,0.5,1,0",
                                     "--steps", "10", "--dt", "1e-2", "--out", str(out)])
        assert result.exit_code == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 12
        assert lines[1].startswith("0,torus,0.5,0.5,,,")

    def test_metric_not_available_on_model(self, runner, tmp_path):
        out = tmp_path / "bad.csv"
        assert runner.invoke(cli, ["geodesics", "--model", "torus", "--metric", "round",
                                   "--ic", "0.5,0.5,1,0", "--out", str(out)]).exit_code == 2

    def test_malformed_initial_condition(self, runner, tmp_path):
        assert runner.invoke(cli, ["geodesics", "--ic", "1,2", "--out", str(tmp_path / "x.csv")]).exit_code == 2

    @pytest.mark.parametrize("override", ["--dt=0", "--steps=0", "--h=-1"])
    def test_invalid_integration_options(self, runner, override, tmp_path):
        result = runner.invoke(cli, ["geodesics", "--ic", "1,0,0,1", override, "--out", str(tmp_path / "x.csv")])
        assert result.exit_code == 2

    @pytest.mark.parametrize("spec", ["beltrami:1,2", "beltrami:a,b,c", "round:1"])
    def test_invalid_metric_specs(self, spec):
        with pytest.raises(UsageError):
            parse_metric_spec("sphere", spec)
