"""Exact mixture marginals, scores, and lookups vs quadrature/FD oracles."""

import numpy as np
import pytest

from lqgmpid.bridge import (
    GaussianMixture,
    build_bridge_context,
    component_quantities,
    control_jacobian,
    log_psi,
    lookup,
    marginal,
    score,
)

from conftest import make_protocol

EPS = 1e-3


@pytest.fixture(scope="module")
def ctx(small_target):
    rng = np.random.default_rng(7)
    protocol = make_protocol(rng, 2, 4, kinds=("general", "scalar_drift"))
    return build_bridge_context(protocol, small_target, np.array([0.3, -0.2]), EPS)


class TestGaussianMixture:
    def test_moments_against_sampling(self, small_target):
        rng = np.random.default_rng(0)
        X = small_target.sample(rng, 200_000)
        np.testing.assert_allclose(X.mean(axis=0), small_target.mean(), atol=5e-3)
        np.testing.assert_allclose(np.cov(X.T), small_target.covariance(), atol=5e-3)

    def test_log_pdf_normalized(self, small_target):
        # 2-D grid quadrature of the density integrates to 1.
        xs = np.linspace(-4, 5, 601)
        X1, X2 = np.meshgrid(xs, xs, indexing="ij")
        X = np.stack([X1.ravel(), X2.ravel()], axis=1)
        total = np.exp(small_target.log_pdf(X)).sum() * (xs[1] - xs[0]) ** 2
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_responsibilities_sum_to_one(self, small_target):
        rng = np.random.default_rng(1)
        R = small_target.responsibilities(rng.normal(size=(50, 2)))
        np.testing.assert_allclose(R.sum(axis=1), 1.0, atol=1e-12)

    def test_json_round_trip(self, small_target):
        doc = small_target.to_json_dict()
        back = GaussianMixture.from_json_dict(doc)
        np.testing.assert_array_equal(back.weights, small_target.weights)
        np.testing.assert_array_equal(back.means, small_target.means)
        np.testing.assert_array_equal(back.covariances, small_target.covariances)


class TestScore:
    def test_score_is_kappa_grad_log_psi(self, ctx):
        rng = np.random.default_rng(2)
        t, h = 0.47, 1e-5
        for x in rng.normal(size=(5, 2)):
            u = score(ctx, t, x)
            g = np.array([
                (log_psi(ctx, t, x + h * e) - log_psi(ctx, t, x - h * e)) / (2 * h)
                for e in np.eye(2)
            ])
            err = np.max(np.abs(u - ctx.kappa_at(t) * g)) / (1 + np.max(np.abs(u)))
            assert err < 1e-6

    def test_control_jacobian_vs_fd(self, ctx):
        t, h = 0.47, 1e-6
        x = np.array([0.1, 0.4])
        J = control_jacobian(ctx.component_quantities(t), x[None])[0]
        Jfd = np.stack([
            (score(ctx, t, x + h * e) - score(ctx, t, x - h * e)) / (2 * h)
            for e in np.eye(2)
        ], axis=1)
        np.testing.assert_allclose(J, Jfd, atol=1e-4)


class TestLogPsiQuadratureOracle:
    def test_log_psi_difference_matches_2d_quadrature(self, ctx, small_target):
        """log psi(x) - log psi(x') vs brute-force grid integration over y."""
        t = 0.47
        st = ctx.backward.evaluate_at(t)
        A_T, B_T, txT = ctx.A_plus_T, ctx.B_plus_T, ctx.theta_x_plus_T
        x0 = ctx.x0

        def log_psi_quad(x):
            n = 401
            ys = np.linspace(-4, 5, n)
            Y1, Y2 = np.meshgrid(ys, ys, indexing="ij")
            Y = np.stack([Y1.ravel(), Y2.ravel()], axis=1)
            lp = small_target.log_pdf(Y)
            gm = (-0.5 * x @ st.A @ x + (x @ st.B) @ Y.T
                  - 0.5 * np.einsum("ni,ij,nj->n", Y, st.C, Y)
                  + st.tx @ x + Y @ st.ty)
            gp = (-0.5 * np.einsum("ni,ij,nj->n", Y, A_T, Y)
                  + Y @ (B_T @ x0) + Y @ txT)
            vals = lp + gm - gp
            m = vals.max()
            return m + np.log(np.sum(np.exp(vals - m)) * (ys[1] - ys[0]) ** 2)

        xa, xb = np.array([0.2, 0.1]), np.array([-0.4, 0.6])
        diff_exact = log_psi(ctx, t, xa) - log_psi(ctx, t, xb)
        diff_quad = log_psi_quad(xa) - log_psi_quad(xb)
        assert abs(diff_exact - diff_quad) < 1e-5


class TestMarginal:
    def test_terminal_matches_target(self, ctx, small_target):
        mT = marginal(ctx, ctx.band[1])
        for k in range(small_target.n_components):
            j = int(np.argmin(np.linalg.norm(mT.means - small_target.means[k], axis=1)))
            assert np.linalg.norm(mT.means[j] - small_target.means[k]) < 5e-3
            assert np.max(np.abs(mT.covariances[j] - small_target.covariances[k])) < 5e-3
        assert abs(mT.weights.sum() - 1.0) < 1e-12

    def test_initial_concentrates_at_x0(self, ctx):
        m0 = marginal(ctx, ctx.band[0])
        assert np.linalg.norm(m0.mean() - ctx.x0) < 5e-3
        assert np.trace(m0.covariance()) < 5e-3

    def test_weights_sum_everywhere(self, ctx):
        for t in np.linspace(ctx.band[0], ctx.band[1], 9):
            m = marginal(ctx, float(t))
            assert abs(m.weights.sum() - 1.0) < 1e-12

    def test_marginal_matches_em_ensemble_moments(self, ctx):
        """Closed-form moments at an interior time vs a large EM ensemble."""
        from lqgmpid.sampler import simulate
        ens = simulate(ctx, B=4000, N=400, seed=5)
        i = np.searchsorted(ens.times, 0.6)
        m = marginal(ctx, float(ens.times[i]))
        emp_mean = ens.states[:, i].mean(axis=0)
        emp_cov = np.cov(ens.states[:, i].T)
        np.testing.assert_allclose(emp_mean, m.mean(), atol=0.05)
        np.testing.assert_allclose(emp_cov, m.covariance(), atol=0.08)


class TestLookup:
    def test_lookup_pins_endpoint_near_terminal(self, ctx):
        x = np.array([0.9, 0.6])
        lk = lookup(ctx, ctx.band[1], x)
        assert np.linalg.norm(lk.pooled_mean - x) < 0.05

    def test_lookup_responsibilities_normalized(self, ctx):
        lk = lookup(ctx, 0.5, np.array([0.0, 0.0]))
        assert abs(np.sum(lk.responsibilities) - 1.0) < 1e-12
        # pooled mean is the responsibility-weighted endpoint average
        pooled = np.einsum("k,ki->i", lk.responsibilities, lk.component_means)
        np.testing.assert_allclose(lk.pooled_mean, pooled, atol=1e-12)
