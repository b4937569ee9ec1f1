"""Coefficient propagation vs direct ODE integration and algebraic identities."""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from lqgmpid.protocol import ProtocolInterval
from lqgmpid.riccati import (
    CoefficientState,
    IntervalSolver,
    SingularTransitionError,
    backward_interval_update,
    evaluate_at,
    forward_interval_update,
    hamiltonian_blocks,
    run_sweep,
)

from conftest import make_interval, make_protocol, rand_spd


def coefficient_ode_rhs(branch, iv, d, m):
    """Independent oracle: the coupled coefficient ODE system in elapsed time."""
    kap, sig, beta, nu = iv.kappa, iv.sigma, iv.beta, iv.nu
    g = beta @ nu

    def rhs(tau, yv):
        A = yv[:d * d].reshape(d, d)
        B = yv[d * d:2 * d * d].reshape(d, d)
        tx = yv[3 * d * d:3 * d * d + d * m].reshape(d, m)
        G = np.concatenate([g[:, None], beta @ np.eye(d)], axis=1)[:, :m]
        if branch == "backward":
            dA = beta + sig.T @ A + A @ sig - kap * A @ A
            dB = sig.T @ B - kap * A @ B
            dtx = G + sig.T @ tx - kap * A @ tx
            dz = (-0.5 * kap * np.trace(A) - 0.5 * nu @ beta @ nu
                  + 0.5 * kap * tx[:, 0] @ tx[:, 0])
        else:
            dA = beta - sig.T @ A - A @ sig - kap * A @ A
            dB = -(sig.T + kap * A) @ B
            dtx = G - (sig.T + kap * A) @ tx
            dz = (-np.trace(sig) - 0.5 * kap * np.trace(A)
                  - 0.5 * nu @ beta @ nu + 0.5 * kap * tx[:, 0] @ tx[:, 0])
        dC = -kap * B.T @ B
        dty = kap * B.T @ tx
        return np.concatenate([dA.ravel(), dB.ravel(), dC.ravel(),
                               dtx.ravel(), dty.ravel(), [dz]])

    return rhs


def pack(st):
    return np.concatenate([st.A.ravel(), st.B.ravel(), st.C.ravel(),
                           st.theta_x.ravel(), st.theta_y.ravel(), [st.zeta]])


def ode_reference(branch, iv, st0, tau):
    d, m = st0.dim, st0.theta_x.shape[1]
    sol = solve_ivp(coefficient_ode_rhs(branch, iv, d, m), (0.0, tau),
                    pack(st0), rtol=1e-12, atol=1e-13, method="DOP853")
    return sol.y[:, -1]


def random_state(rng, d, m, branch, t):
    C = rng.normal(size=(d, d))
    return CoefficientState(
        branch=branch, t=t, A=rand_spd(rng, d), B=rng.normal(size=(d, d)),
        C=0.5 * (C + C.T), theta_x=rng.normal(size=(d, m)),
        theta_y=rng.normal(size=(d, m)), zeta=0.3,
    )


@pytest.mark.parametrize("kind", ["isotropic", "zero_drift", "scalar_drift", "general"])
@pytest.mark.parametrize("branch", ["backward", "forward"])
def test_interval_update_matches_ode(kind, branch):
    rng = np.random.default_rng(hash((kind, branch)) % 2 ** 32)
    d, m, tau = 3, 2, 0.37
    iv = make_interval(rng, d, kind)
    t0 = 1.0 if branch == "backward" else 0.0
    st0 = random_state(rng, d, m, branch, t0)
    update = backward_interval_update if branch == "backward" else forward_interval_update
    got = pack(update(st0, iv, tau))
    ref = ode_reference(branch, iv, st0, tau)
    err = np.max(np.abs(got - ref)) / (1 + np.max(np.abs(ref)))
    assert err < 1e-8


def test_delta_boundary_layer_matches_ode():
    rng = np.random.default_rng(5)
    d, m, eps = 3, 1, 1e-3
    for kind in ("scalar_drift", "general"):
        iv = make_interval(rng, d, kind, kappa=0.7)
        big = np.eye(d) / (iv.kappa * eps)
        st0 = CoefficientState(branch="backward", t=1.0, A=big, B=big.copy(),
                               C=big.copy(), theta_x=np.zeros((d, m)),
                               theta_y=np.zeros((d, m)), zeta=0.0)
        got = pack(backward_interval_update(st0, iv, 0.4))
        ref = ode_reference("backward", iv, st0, 0.4)
        err = np.max(np.abs(got - ref)) / (1 + np.max(np.abs(ref)))
        assert err < 1e-8


def test_free_motion_heat_kernel():
    # beta = 0, sigma = 0: A(tau) = I / (kappa (eps + tau)) exactly.
    d, eps, kap, tau = 3, 1e-3, 1.3, 0.4
    iv = ProtocolInterval(beta=np.zeros((d, d)), nu=np.zeros(d),
                          sigma=np.zeros((d, d)), kappa=kap)
    big = np.eye(d) / (kap * eps)
    st0 = CoefficientState(branch="backward", t=1.0, A=big, B=big.copy(),
                           C=big.copy(), theta_x=np.zeros((d, 1)),
                           theta_y=np.zeros((d, 1)), zeta=0.0)
    out = backward_interval_update(st0, iv, tau)
    np.testing.assert_allclose(out.A, np.eye(d) / (kap * (eps + tau)), atol=1e-10)


@pytest.mark.parametrize("branch", ["backward", "forward"])
def test_blocks_semigroup(branch):
    rng = np.random.default_rng(9)
    for kind in ("scalar_drift", "general"):
        iv = make_interval(rng, 3, kind)
        b1 = hamiltonian_blocks(iv, branch, 0.13).full_matrix()
        b2 = hamiltonian_blocks(iv, branch, 0.24).full_matrix()
        b3 = hamiltonian_blocks(iv, branch, 0.37).full_matrix()
        np.testing.assert_allclose(b2 @ b1, b3, atol=1e-11)


class TestSpecialCaseChain:
    """Each solver specialization agrees with the next-more-general path."""

    def test_general_path_matches_scalar_drift_closed_form(self):
        # sigma = c I with diagonal beta: quadrature/expm path vs hyperbolic form.
        rng = np.random.default_rng(21)
        d = 3
        iv = ProtocolInterval(beta=np.diag(rng.uniform(0.5, 4.0, d)),
                              nu=rng.normal(size=d), sigma=0.3 * np.eye(d), kappa=0.8)
        st0 = random_state(rng, d, 1, "backward", 1.0)
        for branch, update, t0 in (
            ("backward", backward_interval_update, 1.0),
            ("forward", forward_interval_update, 0.0),
        ):
            st = CoefficientState(branch=branch, t=t0, A=st0.A, B=st0.B, C=st0.C,
                                  theta_x=st0.theta_x, theta_y=st0.theta_y, zeta=0.3)
            fast = pack(update(st, iv, 0.37))
            general = pack(update(st, iv, 0.37, force_general=True))
            err = np.max(np.abs(fast - general)) / (1 + np.max(np.abs(general)))
            assert err < 1e-9

    def test_scalar_drift_at_zero_matches_zero_drift(self):
        # The hyperbolic-form blocks are continuous in c at c = 0.
        rng = np.random.default_rng(22)
        d = 3
        beta = rand_spd(rng, d, 2.0)
        nu = rng.normal(size=d)
        iv_zero = ProtocolInterval(beta=beta, nu=nu, sigma=np.zeros((d, d)), kappa=0.8)
        c = 1e-9
        iv_tiny = ProtocolInterval(beta=beta, nu=nu, sigma=c * np.eye(d), kappa=0.8)
        for branch in ("backward", "forward"):
            bz = hamiltonian_blocks(iv_zero, branch, 0.37).full_matrix()
            bt = hamiltonian_blocks(iv_tiny, branch, 0.37).full_matrix()
            np.testing.assert_allclose(bt, bz, atol=1e-8)

    def test_zero_drift_scalar_beta_matches_isotropic(self):
        rng = np.random.default_rng(23)
        d, b = 3, 2.4
        nu = rng.normal(size=d)
        iv = ProtocolInterval(beta=b * np.eye(d), nu=nu,
                              sigma=np.zeros((d, d)), kappa=0.8)
        from lqgmpid.protocol import classify_interval
        assert classify_interval(iv).tag == "Isotropic"
        for branch in ("backward", "forward"):
            bi = hamiltonian_blocks(iv, branch, 0.37).full_matrix()
            bg = hamiltonian_blocks(iv, branch, 0.37, force_general=True).full_matrix()
            np.testing.assert_allclose(bi, bg, atol=1e-11)


class TestSweep:
    def test_breakpoint_states_chain(self):
        rng = np.random.default_rng(31)
        p = make_protocol(rng, 2, 4)
        eps = 1e-3
        bwd = run_sweep(p, "backward", eps)
        fwd = run_sweep(p, "forward", eps)
        np.testing.assert_allclose(bwd.times, [eps, 0.25, 0.5, 0.75, 1 - eps])
        assert bwd.states[-1].t == pytest.approx(1 - eps)
        assert fwd.states[0].t == pytest.approx(eps)
        # The boundary states are the delta layer I/(kappa eps).
        np.testing.assert_allclose(
            bwd.states[-1].A, np.eye(2) / (p.intervals[-1].kappa * eps))
        np.testing.assert_allclose(
            fwd.states[0].A, np.eye(2) / (p.intervals[0].kappa * eps))

    def test_evaluate_at_consistent_with_fresh_propagation(self):
        rng = np.random.default_rng(32)
        p = make_protocol(rng, 2, 4)
        cache = run_sweep(p, "backward", 1e-3)
        t = 0.61
        st1 = evaluate_at(cache, t)
        # memoized second query returns the identical object
        assert evaluate_at(cache, t) is st1
        k = p.grid.interval_of(t)
        st2 = IntervalSolver(p.intervals[k], "backward").propagate(
            cache.states[k + 1], cache.times[k + 1] - t)
        np.testing.assert_array_equal(st1.A, st2.A)
        np.testing.assert_array_equal(st1.theta_y, st2.theta_y)
        assert st1.zeta == st2.zeta

    def test_evaluate_at_snaps_to_breakpoints(self):
        rng = np.random.default_rng(33)
        p = make_protocol(rng, 2, 4)
        cache = run_sweep(p, "forward", 1e-3)
        assert evaluate_at(cache, 0.5) is cache.states[2]
        with pytest.raises(ValueError, match="outside the working band"):
            evaluate_at(cache, 1.5)

    def test_zeta_free_evaluation_changes_nothing_else(self):
        rng = np.random.default_rng(34)
        p = make_protocol(rng, 2, 3)
        full = run_sweep(p, "backward", 1e-3, with_zeta=True)
        t = 0.47
        with_z = evaluate_at(full, t, with_zeta=True)
        without = evaluate_at(full, t, with_zeta=False)
        assert math.isnan(without.zeta) and math.isfinite(with_z.zeta)
        for fieldname in ("A", "B", "C", "theta_x", "theta_y"):
            np.testing.assert_array_equal(getattr(with_z, fieldname),
                                          getattr(without, fieldname))

    def test_single_interval_reuse_equals_fresh_sweep(self):
        rng = np.random.default_rng(35)
        p = make_protocol(rng, 2, 5, kinds=("zero_drift",))
        base = run_sweep(p, "backward", 1e-3)
        changed = 2
        iv = p.intervals[changed]
        perturbed = ProtocolInterval(beta=iv.beta + 0.05 * np.eye(2), nu=iv.nu,
                                     sigma=iv.sigma, kappa=iv.kappa)
        from lqgmpid.protocol import Protocol
        p2 = Protocol(grid=p.grid, intervals=p.intervals[:2] + (perturbed,) + p.intervals[3:])
        fresh = run_sweep(p2, "backward", 1e-3)
        reused = run_sweep(p2, "backward", 1e-3, reuse=(base, changed))
        for a, b in zip(fresh.states, reused.states):
            np.testing.assert_array_equal(a.A, b.A)
            np.testing.assert_array_equal(a.theta_x, b.theta_x)
            assert a.zeta == b.zeta

    def test_epsilon_out_of_range_rejected(self):
        rng = np.random.default_rng(36)
        p = make_protocol(rng, 2, 4)
        with pytest.raises(ValueError, match="epsilon"):
            run_sweep(p, "backward", 0.2)

    def test_singular_transition_detected(self):
        # Free motion: X = I + kappa tau A0, exactly singular at A0 = -I/(kappa tau).
        d, kappa, tau = 2, 1.0, 0.5
        iv = ProtocolInterval(beta=np.zeros((d, d)), nu=np.zeros(d),
                              sigma=np.zeros((d, d)), kappa=kappa)
        st = CoefficientState(branch="backward", t=1.0,
                              A=-np.eye(d) / (kappa * tau),
                              B=np.eye(d), C=np.eye(d),
                              theta_x=np.zeros((d, 1)), theta_y=np.zeros((d, 1)),
                              zeta=0.0)
        with pytest.raises(SingularTransitionError):
            backward_interval_update(st, iv, tau)
