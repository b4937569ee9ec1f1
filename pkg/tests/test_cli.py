"""Command-line harness: exit codes, artifacts, and oracle suites in-process."""

import json

import numpy as np
import pytest

from lqgmpid.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_VALIDATION,
    main,
    suite_bridge,
    suite_gradient,
    suite_riccati,
    suite_shift,
)
from lqgmpid.protocol import build_baseline_protocol, protocol_to_json


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestSweepCommand:
    def test_builder_config_writes_artifacts(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "cfg.json",
                         {"builder": {"kind": "baseline"}, "epsilon": 1e-3})
        out = tmp_path / "out"
        assert main(["sweep", "--config", cfg, "--out", str(out)]) == EXIT_OK
        dump = json.loads((out / "sweep.json").read_text())
        assert dump["dim"] == 2
        assert {"backward", "forward"} <= set(dump)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["precompute_ms"] > 0
        assert "dim 2" in capsys.readouterr().out

    def test_protocol_file_roundtrip(self, tmp_path):
        proto_path = tmp_path / "p.json"
        proto_path.write_text(protocol_to_json(build_baseline_protocol(
            __import__("lqgmpid.protocol", fromlist=["CorridorGeometry"]).CorridorGeometry())))
        cfg = write_json(tmp_path / "cfg.json", {"protocol_file": "p.json"})
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK

    def test_invalid_protocol_exits_1(self, tmp_path, capsys):
        doc = json.loads(protocol_to_json(build_baseline_protocol(
            __import__("lqgmpid.protocol", fromlist=["CorridorGeometry"]).CorridorGeometry())))
        doc["intervals"][3]["beta"] = [-5.0, 0.0, 0.0, -5.0]  # not PSD
        cfg = write_json(tmp_path / "cfg.json", {"protocol": doc})
        assert main(["sweep", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
        assert "protocol violation" in capsys.readouterr().err

    def test_bad_config_exits_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "cfg.json", {"builder": {"kind": "nonsense"}})
        assert main(["sweep", "--config", cfg]) == EXIT_CONFIG
        cfg2 = write_json(tmp_path / "cfg2.json", {})
        assert main(["sweep", "--config", cfg2]) == EXIT_CONFIG
        assert main(["sweep", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_hierarchical_builder_precompute_budget(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "cfg.json",
                         {"builder": {"kind": "hierarchical", "d": 32,
                                      "variant": "B2", "t_star": 0.5, "K": 12}})
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["precompute_ms"] < 200.0


class TestExperimentCommand:
    def test_config_file_run_and_overrides(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "e1.json", {
            "experiment": "e1",
            "options": {"B": 30, "N": 60, "iterations": 1, "snapshot_particles": 10},
        })
        out = tmp_path / "run"
        assert main(["experiment", "--config", cfg, "--out", str(out),
                     "--seed", "3"]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seed"] == 3
        assert "baseline corridor loss" in capsys.readouterr().out

    def test_conflicting_id_exits_2(self, tmp_path):
        cfg = write_json(tmp_path / "e1.json", {"experiment": "e1"})
        assert main(["experiment", "e2", "--config", cfg]) == EXIT_CONFIG

    def test_missing_id_and_config_exits_2(self):
        assert main(["experiment"]) == EXIT_CONFIG


class TestValidateCommand:
    def test_all_suites_pass(self, capsys):
        assert main(["validate"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.count("PASS") >= 15

    def test_fault_injection_fails_exactly_one_check(self, capsys):
        assert main(["validate", "shift", "--corrupt-column", "1"]) == EXIT_VALIDATION
        out = capsys.readouterr().out
        failing = [ln for ln in out.splitlines() if "FAIL" in ln]
        assert len(failing) == 1
        assert "column_1" in failing[0]

    def test_suites_report_finite_values(self):
        for suite in (suite_riccati(), suite_bridge(), suite_shift(),
                      suite_gradient()):
            for check in suite:
                assert np.isfinite(check.value), check.name
                assert check.passed, f"{check.name}: {check.value}"
