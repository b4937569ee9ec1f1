"""Experiment configs, hierarchical targets, and run-directory reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from lqgmpid.experiments import (
    ExperimentConfig,
    build_hierarchical_target,
    corridor_target,
    default_config,
    entrance_source,
    h1_scenarios,
    run_experiment,
)


class TestConfig:
    def test_round_trip(self):
        cfg = default_config("e1", seed=3, threads=2, options={"B": 100})
        back = ExperimentConfig.from_json_dict(cfg.to_json_dict())
        assert back == cfg
        assert back.options["B"] == 100
        assert back.options["N"] == 600  # defaults survive the override merge

    def test_unknown_experiment_rejected(self):
        with pytest.raises(ValueError, match="unknown experiment"):
            default_config("e9")

    def test_unknown_fields_rejected(self):
        with pytest.raises(ValueError, match="unknown config fields"):
            ExperimentConfig.from_json_dict({"experiment": "e1", "bogus": 1})
        with pytest.raises(ValueError, match="missing the 'experiment'"):
            ExperimentConfig.from_json_dict({"seed": 1})

    def test_h1_scenario_grid_has_21_cells(self):
        cells = h1_scenarios(default_config("h1").options)
        assert len(cells) == 21
        assert len({(c["d"], c["M"], c["variant"]) for c in cells}) == 21

    def test_corridor_target_and_source(self):
        opts = default_config("e2").options
        tgt = corridor_target(opts)
        src = entrance_source(opts)
        np.testing.assert_allclose(tgt.weights, [0.5, 0.5])
        np.testing.assert_allclose(tgt.means, [[3.0, 0.5], [3.0, -0.5]])
        np.testing.assert_allclose(src.means, [[-0.3, 0.5], [-0.3, -0.5]])
        np.testing.assert_allclose(src.covariances[0], 0.12**2 * np.eye(2))


class TestHierarchicalTarget:
    @pytest.mark.parametrize("d", [4, 8, 16, 32])
    @pytest.mark.parametrize("M", [2, 4, 8, 16])
    def test_block_structure_invariants(self, d, M):
        from lqgmpid.experiments import _h1_split

        d_T, d_B, d_L = _h1_split(d)
        mixture, info = build_hierarchical_target(d_T, d_B, d_L, M)
        assert mixture.n_components == M
        assert mixture.dim == d
        np.testing.assert_allclose(mixture.weights.sum(), 1.0, atol=1e-15)
        # all modes share the trunk endpoint
        trunk = mixture.means[:, :d_T]
        np.testing.assert_allclose(trunk - trunk[0], 0.0, atol=1e-12)
        # designed terminal block traces are ordered trunk < branch < local
        tT, tB, tL = info["designed_block_traces"]
        assert tT < tB < tL
        assert info["branch_codebook_size"] * info["local_codebook_size"] == M

    def test_mode_count_must_be_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            build_hierarchical_target(2, 2, 4, 6)

    def test_unsupported_dimension_rejected(self):
        from lqgmpid.experiments import _h1_split

        with pytest.raises(ValueError, match="d = 4 or d >= 8"):
            _h1_split(6)


TINY_E1 = {
    "B": 40, "N": 60, "iterations": 1, "snapshot_particles": 20,
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "e1_tiny"
    cfg = default_config("e1", options=dict(TINY_E1))
    summary = run_experiment(cfg, out)
    return out, summary


class TestRunDirectory:

    def test_artifacts_exist_and_are_listed(self, tiny_run):
        out, _ = tiny_run
        manifest = json.loads((out / "manifest.json").read_text())
        for rel in manifest["artifacts"]:
            assert (out / rel).exists(), rel
        for required in ("config.json", "summary.json", "traces/optimization.csv"):
            assert required in manifest["artifacts"]

    def test_summary_reports_both_variants(self, tiny_run):
        _, summary = tiny_run
        assert {"baseline", "optimized", "optimization"} <= set(summary)
        assert summary["optimization"]["iterations"] == 1

    def test_protocol_json_is_plain_document(self, tiny_run):
        out, _ = tiny_run
        doc = json.loads((out / "protocol_baseline.json").read_text())
        assert isinstance(doc, dict)
        assert "intervals" in doc and "grid" in doc

    def test_rerun_is_byte_identical(self, tiny_run, tmp_path):
        out, _ = tiny_run
        out2 = tmp_path / "again"
        cfg = default_config("e1", options=dict(TINY_E1))
        run_experiment(cfg, out2)
        manifest = json.loads((out / "manifest.json").read_text())
        for rel in manifest["artifacts"]:
            if rel == "manifest.json":
                continue  # contains wall-clock timings
            a = (out / rel).read_bytes()
            b = (out2 / rel).read_bytes()
            assert a == b, f"artifact differs across reruns: {rel}"
