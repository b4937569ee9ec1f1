"""Euler-Maruyama sampling against exact marginals and synthetic diagnostics."""

import numpy as np
import pytest

from lqgmpid.bridge import build_bridge_context, marginal
from lqgmpid.protocol import build_baseline_protocol
from lqgmpid.sampler import (
    BlowUpError,
    TrajectoryEnsemble,
    branching_time,
    control_diagnostics,
    export_trajectories,
    guide_cost,
    particle_noise,
    simulate,
    simulate_shifted,
    subspace_variance_trace,
    tv_mode_error,
)
from lqgmpid.shift import build_shifted_context


@pytest.fixture(scope="module")
def ctx(geometry, e1_target):
    protocol = build_baseline_protocol(geometry)
    return build_bridge_context(protocol, e1_target, np.zeros(2), 1e-3)


class TestNoise:
    def test_particle_noise_deterministic_and_independent(self):
        a = particle_noise(3, 7, 50, 2)
        np.testing.assert_array_equal(a, particle_noise(3, 7, 50, 2))
        b = particle_noise(3, 8, 50, 2)
        assert not np.array_equal(a, b)
        assert a.shape == (50, 2)

    def test_simulate_reproducible(self, ctx):
        e1 = simulate(ctx, B=8, N=40, seed=5)
        e2 = simulate(ctx, B=8, N=40, seed=5)
        np.testing.assert_array_equal(e1.states, e2.states)

    def test_explicit_noise_matches_default_stream(self, ctx):
        B, N = 4, 30
        noise = np.stack([particle_noise(5, n, N, 2) for n in range(B)])
        e_default = simulate(ctx, B=B, N=N, seed=5)
        e_explicit = simulate(ctx, B=B, N=N, seed=5, noise=noise)
        np.testing.assert_array_equal(e_default.states, e_explicit.states)


class TestSimulate:
    def test_terminal_hits_target_modes(self, ctx, e1_target):
        ens = simulate(ctx, B=1500, N=300, seed=0)
        assert tv_mode_error(ens, e1_target) < 0.06
        mT = marginal(ctx, ctx.band[1])
        np.testing.assert_allclose(ens.terminal.mean(axis=0), mT.mean(), atol=0.05)

    def test_interior_moments_match_exact_marginal(self, ctx):
        ens = simulate(ctx, B=1500, N=300, seed=1)
        i = len(ens.times) // 2
        m = marginal(ctx, float(ens.times[i]))
        np.testing.assert_allclose(ens.states[:, i].mean(axis=0), m.mean(), atol=0.08)
        np.testing.assert_allclose(np.trace(np.cov(ens.states[:, i].T)),
                                   np.trace(m.covariance()), rtol=0.15)

    def test_blow_up_reported_with_step(self, ctx):
        noise = np.full((2, 40, 2), 1e9)
        with pytest.raises(BlowUpError, match="step 1"):
            simulate(ctx, B=2, N=40, seed=0, noise=noise)

    def test_shifted_zero_offsets_match_delta_source(self, geometry, e1_target):
        protocol = build_baseline_protocol(geometry)
        sctx, props = build_shifted_context(protocol, e1_target, 1e-3)
        Z = np.zeros((6, 2))
        es = simulate_shifted(sctx, props, Z, N=50, seed=2)
        ed = simulate(sctx, B=6, N=50, seed=2)
        np.testing.assert_allclose(es.states, ed.states, atol=1e-10)
        np.testing.assert_array_equal(es.z_offsets, Z)


class TestDiagnostics:
    def test_tv_mode_error_counts_misassigned_mass(self, e1_target):
        # 70/30 split over a 50/50 target: TV = 0.2 exactly
        X = np.concatenate([
            np.tile(e1_target.means[0], (70, 1)),
            np.tile(e1_target.means[1], (30, 1)),
        ])
        assert tv_mode_error(X, e1_target) == pytest.approx(0.2, abs=1e-12)

    def test_guide_cost_zero_on_the_guide(self, geometry):
        protocol = build_baseline_protocol(geometry)
        times = np.linspace(0.0, 1.0, 21)
        nus = np.stack([protocol.interval_at(float(t)).nu for t in times])
        states = np.tile(nus[None], (3, 1, 1))
        ens = TrajectoryEnsemble(times=times, states=states,
                                 z_offsets=np.zeros((3, 2)), seed=0)
        assert guide_cost(ens, protocol) == 0.0

    def test_branching_time_on_synthetic_split(self):
        times = np.linspace(0.0, 1.0, 11)
        states = np.zeros((4, 11, 2))
        # block coordinate 1 splits to +-1 from t = 0.5 onward
        states[:2, times >= 0.5, 1] = 1.0
        states[2:, times >= 0.5, 1] = -1.0
        ens = TrajectoryEnsemble(times=times, states=states,
                                 z_offsets=np.zeros((4, 2)), seed=0)
        assert branching_time(ens, slice(1, 2)) == pytest.approx(0.5)
        assert branching_time(ens, slice(0, 1)) is None or \
            branching_time(ens, slice(0, 1)) == 0.0  # flat block: 0 >= 0 at t=0

    def test_subspace_trace_analytic_vs_empirical(self, ctx):
        ens = simulate(ctx, B=3000, N=200, seed=3)
        idx = np.arange(0, 201, 40)
        mixtures = [marginal(ctx, float(ens.times[i])) for i in idx]
        blocks = {"all": slice(0, 2)}
        emp = subspace_variance_trace(ens, blocks)["all"]
        ana = subspace_variance_trace(mixtures, blocks)["all"]
        np.testing.assert_allclose(emp["trace"][idx][1:], ana["trace"][1:],
                                   rtol=0.15)

    def test_control_diagnostics_finite(self, ctx):
        times = np.linspace(0.05, 0.95, 7)
        effort, stiffness = control_diagnostics(ctx, times, n_samples=256)
        assert np.isfinite(effort) and effort > 0
        assert np.isfinite(stiffness) and stiffness > 0

    def test_export_trajectories_csv(self, ctx, tmp_path):
        ens = simulate(ctx, B=3, N=10, seed=4)
        path = tmp_path / "traj.csv"
        export_trajectories(ens, str(path), snapshot_times=np.array([0.0, 0.5, 1.0]))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "particle,step,t,x_0,x_1"
        assert len(lines) == 1 + 3 * 3
