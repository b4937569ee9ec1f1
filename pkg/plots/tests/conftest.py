"""Session fixtures: tiny experiment run directories rendered by the figures."""

import pytest

from lqgmpid.experiments import ExperimentConfig, run_experiment

_TINY_OPTIONS = {
    "e1": {"B": 40, "N": 60, "iterations": 2, "snapshot_particles": 16},
    "e2": {"n_source": 8, "N": 60, "iterations": 2, "snapshot_particles": 16},
    "h1": {
        "dims": [4], "modes": [2, 4], "dim_sweep_modes": 2, "mode_sweep_dim": 4,
        "B": 64, "N": 40, "trace_nodes": 21,
        "subspace_check": {"d": 4, "M": 2, "variant": "B1", "B": 128},
    },
    "e3": {"B": 40, "N": 40, "iterations": 2, "n_source": 8,
           "effort_nodes": 31, "effort_samples": 64},
}


def _make_run(tmp_path_factory, experiment: str):
    out = tmp_path_factory.mktemp(f"{experiment}_run")
    cfg = ExperimentConfig(experiment, seed=0,
                           options=dict(_TINY_OPTIONS[experiment]))
    run_experiment(cfg, out)
    return out


@pytest.fixture(scope="session")
def e1_run(tmp_path_factory):
    return _make_run(tmp_path_factory, "e1")


@pytest.fixture(scope="session")
def e2_run(tmp_path_factory):
    return _make_run(tmp_path_factory, "e2")


@pytest.fixture(scope="session")
def h1_run(tmp_path_factory):
    return _make_run(tmp_path_factory, "h1")


@pytest.fixture(scope="session")
def e3_run(tmp_path_factory):
    return _make_run(tmp_path_factory, "e3")


@pytest.fixture(scope="session")
def run_for(e1_run, e2_run, h1_run, e3_run):
    def pick(figure: str):
        prefix = figure.split("_", 1)[0]
        return {"e1": e1_run, "e2": e2_run, "h1": h1_run, "e3": e3_run}[prefix]
    return pick
