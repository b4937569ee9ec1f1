"""Gaussian-mixture sources via per-particle coordinate shifts.

A shift x_tilde = x - z leaves (sigma, beta, kappa) and hence all quadratic
coefficients unchanged; only the theta drives move, linearly in z:

    theta^(pm)(z) = theta^(pm)|_nu - Lambda^(pm) z,

where the shift-propagator matrices Lambda_x^-, Lambda_y^-, Lambda_x^+ are
assembled column-by-column from the theta responses to unit drives nu = e_j.
Those unit responses are carried as extra drive columns of the base sweeps, so
the propagators cost nothing beyond the base precompute.  Per particle only the
linear quantities are corrected:

    q_tilde_k(z)   = q_k0 - (Ly^-(t) + P_k - Lx^+(T-eps)) z
    lam_tilde_k(z) = lam_k0 - (Lx^-(t) + B^- S_k^-1 (Ly^-(t) + P_k - Lx^+(T-eps))) z
    C_tilde_k(z)   = -log|S_k|/2 + log|P_k|/2 - m_tilde'P m_tilde/2 + q_tilde'S^-1 q_tilde/2

with m_tilde_k = m_k - z, and the control keeps the shared (Lam_k, S_k).  The
per-particle work is O(K d^2): no factorizations inside the particle loop.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .bridge import (
    BridgeContext,
    ComponentBridgeState,
    GaussianMixture,
    MarginalMixture,
    _chol_logdet,
    _sym_batch,
    build_bridge_context,
)
from .protocol import Protocol
from .riccati import BACKWARD, FORWARD, SweepCache, run_sweep

__all__ = [
    "ShiftPropagators",
    "ParticleFrame",
    "build_propagators",
    "propagators_from_context",
    "build_shifted_context",
    "shifted_quantities",
    "shifted_score",
    "shifted_control_jacobian",
    "shifted_marginal",
    "per_particle_marginal",
    "freeze_source_offsets",
]


class ShiftPropagators:
    """Shift-propagator matrices assembled from unit-drive theta columns."""

    def __init__(self, backward: SweepCache, forward: SweepCache):
        d = backward.dim
        if backward.states[0].theta_x.shape[1] != d + 1:
            raise ValueError("sweeps must be run with unit drives to build propagators")
        if backward.branch != BACKWARD or forward.branch != FORWARD:
            raise ValueError("expected (backward, forward) sweep caches")
        self.backward = backward
        self.forward = forward
        self.dim = d

    def Lx_minus(self, t: float) -> np.ndarray:
        return self.backward.evaluate_at(t, with_zeta=False).theta_x[:, 1:]

    def Ly_minus(self, t: float) -> np.ndarray:
        return self.backward.evaluate_at(t, with_zeta=False).theta_y[:, 1:]

    def Lx_plus(self, t: float) -> np.ndarray:
        return self.forward.evaluate_at(t, with_zeta=False).theta_x[:, 1:]

    @property
    def Lx_plus_T(self) -> np.ndarray:
        return self.forward.terminal_snapshot.theta_x[:, 1:]

    def base_theta(self, branch: str, t: float) -> tuple[np.ndarray, np.ndarray]:
        cache = self.backward if branch == BACKWARD else self.forward
        st = cache.evaluate_at(t, with_zeta=False)
        return st.tx, st.ty


def build_propagators(protocol: Protocol, epsilon: float = 1e-3) -> ShiftPropagators:
    """Run unit-drive sweeps (quadratic coefficients shared with the base drive)."""
    bwd = run_sweep(protocol, BACKWARD, epsilon, with_unit_drives=True)
    fwd = run_sweep(protocol, FORWARD, epsilon, with_unit_drives=True)
    return ShiftPropagators(bwd, fwd)


def propagators_from_context(ctx: BridgeContext) -> ShiftPropagators:
    """Reuse the context's sweeps (requires the context built with unit drives)."""
    return ShiftPropagators(ctx.backward, ctx.forward)


def build_shifted_context(protocol: Protocol, target: GaussianMixture,
                          epsilon: float = 1e-3,
                          reuse: tuple | None = None,
                          with_zeta: bool = True) -> tuple[BridgeContext, ShiftPropagators]:
    """Context in the shifted frame (x_tilde0 = 0) plus its propagators.

    Per-particle evaluation shifts the guide centers and target means by the
    particle offset z; the theta corrections are exactly linear in z for any
    protocol, including nonzero linear drift.  With sigma = 0 the shifted
    frame is a plain translation of the physical frame; with sigma != 0 the
    per-particle bridges are defined directly in shifted coordinates (the
    linear drift acts on x - z rather than x) and still hit the exact target
    mixture after translating back by z.

    `reuse=(context, changed)` forwards the single-changed-interval resweep
    shortcut to the underlying sweeps.
    """
    ctx = build_bridge_context(protocol, target, np.zeros(protocol.dim),
                               epsilon=epsilon, with_unit_drives=True, reuse=reuse,
                               with_zeta=with_zeta)
    return ctx, propagators_from_context(ctx)


def freeze_source_offsets(source: GaussianMixture, n_particles: int,
                          seed: int) -> dict:
    """Draw the frozen particle offsets z^(n) once, with a recorded seed."""
    rng = np.random.default_rng(seed)
    z = source.sample(rng, n_particles)
    return {"seed": int(seed), "offsets": z}


class ParticleFrame:
    """Per-particle shifted linear quantities at one query time, for a batch of z.

    All arrays are stacked over (particle n, component k); the shared quadratic
    quantities live in the embedded ComponentBridgeState.
    """

    def __init__(self, cq: ComponentBridgeState, z: np.ndarray,
                 q_tilde: np.ndarray, lam_tilde: np.ndarray, log_const: np.ndarray,
                 target: GaussianMixture):
        self.cq = cq
        self.z = z                  # (B, d)
        self.q_tilde = q_tilde      # (B, K, d)
        self.lam_tilde = lam_tilde  # (B, K, d)
        self.log_const = log_const  # (B, K): log pi_k + C_tilde_k(z)
        self.target = target

    @property
    def shifted_target_means(self) -> np.ndarray:
        return self.target.means[None, :, :] - self.z[:, None, :]


def shifted_quantities(ctx: BridgeContext, props: ShiftPropagators,
                       z: np.ndarray, t: float) -> ParticleFrame:
    """Assemble the z-corrected per-particle quantities at time t."""
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    cq = ctx.component_quantities(t)
    tgt = ctx.target
    P = tgt.precisions
    Ly = props.Ly_minus(t)
    Lx = props.Lx_minus(t)
    LxT = props.Lx_plus_T
    # R_k = Ly^-(t) + P_k - Lx^+(T-eps): the linear response of q_k to z.
    R = Ly[None] + P - LxT[None]                    # (K, d, d)
    W = Lx[None] + np.einsum("kij,kjl->kil", cq.B_S_inv, R)  # (K, d, d)
    q_tilde = cq.q[None] - np.einsum("kij,nj->nki", R, Z)
    lam_tilde = cq.lam[None] - np.einsum("kij,nj->nki", W, Z)
    m_tilde = tgt.means[None] - Z[:, None, :]
    Sinv_qt = np.einsum("kij,nkj->nki", cq.S_inv, q_tilde)
    log_const = (
        np.log(tgt.weights)[None, :]
        - 0.5 * cq.log_det_S[None, :]
        - 0.5 * tgt.log_det_covariances[None, :]
        - 0.5 * np.einsum("nki,kij,nkj->nk", m_tilde, P, m_tilde)
        + 0.5 * np.einsum("nki,nki->nk", q_tilde, Sinv_qt)
    )
    return ParticleFrame(cq, Z, q_tilde, lam_tilde, log_const, tgt)


def _shifted_log_weights(frame: ParticleFrame, X_tilde: np.ndarray) -> np.ndarray:
    cq = frame.cq
    quad = np.einsum("ni,kij,nj->nk", X_tilde, cq.Lam, X_tilde)
    lin = np.einsum("nki,ni->nk", frame.lam_tilde, X_tilde)
    return frame.log_const - 0.5 * quad + lin


def shifted_score_field(frame: ParticleFrame, X_tilde: np.ndarray) -> np.ndarray:
    """Per-particle control in the shifted frame; row n pairs z[n] with X_tilde[n]."""
    cq = frame.cq
    logw = _shifted_log_weights(frame, X_tilde)
    logw -= logsumexp(logw, axis=1, keepdims=True)
    rho = np.exp(logw)
    a = frame.lam_tilde - np.einsum("kij,nj->nki", cq.Lam, X_tilde)
    return cq.kappa * np.einsum("nk,nki->ni", rho, a)


def shifted_score(ctx: BridgeContext, props: ShiftPropagators, z: np.ndarray,
                  t: float, x_tilde: np.ndarray) -> np.ndarray:
    """Control for one particle offset z at shifted position x_tilde."""
    z = np.asarray(z, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    single = x_tilde.ndim == 1
    Z = np.atleast_2d(z)
    X = np.atleast_2d(x_tilde)
    if Z.shape[0] == 1 and X.shape[0] > 1:
        Z = np.broadcast_to(Z, X.shape)
    frame = shifted_quantities(ctx, props, Z, t)
    out = shifted_score_field(frame, X)
    return out[0] if single else out


def shifted_control_jacobian(frame: ParticleFrame, X_tilde: np.ndarray) -> np.ndarray:
    """Spatial Jacobian of the per-particle control in the shifted frame.

    Same softmax product rule as the delta-source Jacobian, with the
    particle-specific linear terms lambda_tilde(z).
    """
    cq = frame.cq
    logw = _shifted_log_weights(frame, X_tilde)
    logw -= logsumexp(logw, axis=1, keepdims=True)
    rho = np.exp(logw)
    a = frame.lam_tilde - np.einsum("kij,nj->nki", cq.Lam, X_tilde)
    mean_a = np.einsum("nk,nki->ni", rho, a)
    second = np.einsum("nk,nki,nkj->nij", rho, a, a)
    cov = second - np.einsum("ni,nj->nij", mean_a, mean_a)
    mean_lam = np.einsum("nk,kij->nij", rho, cq.Lam)
    return cq.kappa * (cov - mean_lam)


def per_particle_marginal(ctx: BridgeContext, props: ShiftPropagators,
                          frame: ParticleFrame, t: float):
    """Shifted-frame marginal components per particle.

    Returns (Pi, mu_tilde, weights) with shapes (K, d, d) -- shared across
    particles -- (B, K, d) and (B, K); `weights` is normalized within each
    particle.
    """
    cq = frame.cq
    Z = frame.z
    B = Z.shape[0]
    fwd = ctx.forward.evaluate_at(t, with_zeta=False)
    Pi = _sym_batch(fwd.A[None] + cq.Lam)       # (K, d, d); z-independent
    log_det_Pi = _chol_logdet(Pi)
    # Shifted forward drive: theta_x^+(t)(z) = theta_x^+(t)|_nu - Lx^+(t) z, and
    # B^+(t) x_tilde0 = 0 since the shifted start is the origin.
    theta_plus = fwd.tx[None, :] - Z @ props.Lx_plus(t).T     # (B, d)
    rhs = theta_plus[:, None, :] + frame.lam_tilde            # (B, K, d)
    mu_tilde = np.linalg.solve(
        np.broadcast_to(Pi[None], (B,) + Pi.shape), rhs[..., None]
    )[..., 0]
    logw = (
        frame.log_const
        - 0.5 * log_det_Pi[None, :]
        + 0.5 * np.einsum("nki,kij,nkj->nk", mu_tilde, Pi, mu_tilde)
    )
    logw -= logsumexp(logw, axis=1, keepdims=True)  # normalize within each particle
    return Pi, mu_tilde, np.exp(logw)


def shifted_marginal(ctx: BridgeContext, props: ShiftPropagators,
                     z_list: np.ndarray, t: float) -> MarginalMixture:
    """Exact B*K-component mixture marginal (physical frame) for frozen offsets."""
    Z = np.atleast_2d(np.asarray(z_list, dtype=float))
    B, d = Z.shape
    frame = shifted_quantities(ctx, props, Z, t)
    K = frame.cq.n_components
    Pi, mu_tilde, w = per_particle_marginal(ctx, props, frame, t)
    weights = (w / B).reshape(B * K)
    means = (mu_tilde + Z[:, None, :]).reshape(B * K, d)
    precisions = np.broadcast_to(Pi[None], (B,) + Pi.shape).reshape(B * K, d, d).copy()
    return MarginalMixture(t=t, weights=weights, means=means, precisions=precisions)
