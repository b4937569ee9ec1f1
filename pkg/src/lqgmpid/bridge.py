"""Closed-form score, exact mixture marginals, and terminal look-up law.

For a delta source at x0 and a Gaussian-mixture target, the backward message
psi_t(x) is itself a sum of exponential-quadratics: per target component k,

    S_k  = C_t^- + P_k - A_{T-eps}^+
    q_k  = theta_y,t^- + P_k m_k - B_{T-eps}^+ x0 - theta_x,T-eps^+
    Lam_k = A_t^- - B_t^- S_k^-1 (B_t^-)'
    lam_k = theta_x,t^- + B_t^- S_k^-1 q_k
    log w_k = log pi_k - log|Sigma_k|/2 - log|S_k|/2 - m_k'P_k m_k/2 + q_k'S_k^-1 q_k/2

(all k-independent additive constants dropped).  The optimal control is the
responsibility-weighted affine field u* = kappa_t sum_k rho_k(x)(-Lam_k x + lam_k),
the time-t marginal is the Gaussian mixture with precisions Pi_k = A_t^+ + Lam_k,
and the terminal look-up law is the mixture of N(y_hat_k(x), S_k^-1) with the same
responsibilities, y_hat_k(x) = S_k^-1((B_t^-)'x + q_k).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .protocol import Protocol
from .riccati import BACKWARD, FORWARD, CoefficientState, SweepCache, run_sweep

__all__ = [
    "GaussianMixture",
    "ComponentBridgeState",
    "MarginalMixture",
    "LookupResult",
    "BridgeContext",
    "build_bridge_context",
    "component_quantities",
    "log_psi",
    "score",
    "score_field",
    "control_jacobian",
    "marginal",
    "lookup",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


def _sym_batch(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _chol_logdet(M: np.ndarray) -> np.ndarray:
    """Batched log-determinants through Cholesky; raises if any slice is not SPD."""
    L = np.linalg.cholesky(M)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Gaussian mixture with cached precisions and log-determinants."""

    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, d)
    covariances: np.ndarray  # (K, d, d)
    precisions: np.ndarray = field(init=False, repr=False)
    log_det_covariances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        c = np.asarray(self.covariances, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if not (w.ndim == 1 and m.shape[0] == len(w) and c.shape == (len(w), m.shape[1], m.shape[1])):
            raise ValueError("inconsistent mixture shapes")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1 within 1e-12")
        c = _sym_batch(c)
        logdet = _chol_logdet(c)  # raises LinAlgError if any covariance is not SPD
        prec = np.linalg.inv(c)
        prec = _sym_batch(prec)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariances", c)
        object.__setattr__(self, "precisions", prec)
        object.__setattr__(self, "log_det_covariances", logdet)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_pdf(self, X: np.ndarray) -> np.ndarray:
        """(n, K) matrix of per-component Gaussian log-densities."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        diff = X[:, None, :] - self.means[None, :, :]
        maha = np.einsum("nki,kij,nkj->nk", diff, self.precisions, diff)
        return -0.5 * (maha + self.log_det_covariances[None, :] + self.dim * _LOG_2PI)

    def log_pdf(self, X: np.ndarray) -> np.ndarray:
        comp = self.component_log_pdf(X) + np.log(self.weights)[None, :]
        return logsumexp(comp, axis=1)

    def responsibilities(self, X: np.ndarray) -> np.ndarray:
        comp = self.component_log_pdf(X) + np.log(self.weights)[None, :]
        comp -= logsumexp(comp, axis=1, keepdims=True)
        return np.exp(comp)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        diff = self.means - mu
        return (
            np.einsum("k,kij->ij", self.weights, self.covariances)
            + np.einsum("k,ki,kj->ij", self.weights, diff, diff)
        )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        eps = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", chol[idx], eps)

    def to_json_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "GaussianMixture":
        return GaussianMixture(
            weights=np.asarray(obj["weights"], dtype=float),
            means=np.asarray(obj["means"], dtype=float),
            covariances=np.asarray(obj["covariances"], dtype=float),
        )


# ---------------------------------------------------------------------------
# Bridge context and per-time component quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentBridgeState:
    """Per-target-component bridge quantities at one query time (stacked over k)."""

    t: float
    kappa: float
    S: np.ndarray          # (K, d, d)
    S_inv: np.ndarray      # (K, d, d)
    q: np.ndarray          # (K, d)
    Lam: np.ndarray        # (K, d, d)
    lam: np.ndarray        # (K, d)
    log_omega: np.ndarray  # (K,)
    B_minus: np.ndarray    # (d, d)
    log_det_S: np.ndarray  # (K,)
    B_S_inv: np.ndarray    # (K, d, d); B_t^- S_k^-1

    @property
    def n_components(self) -> int:
        return len(self.q)


@dataclass(frozen=True)
class MarginalMixture:
    """Exact time-t marginal: Gaussian mixture in precision form."""

    t: float
    weights: np.ndarray     # (K,)
    means: np.ndarray       # (K, d)
    precisions: np.ndarray  # (K, d, d)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        return _sym_batch(np.linalg.inv(self.precisions))

    def as_mixture(self) -> GaussianMixture:
        return GaussianMixture(self.weights, self.means, self.covariances)

    def log_pdf(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        diff = X[:, None, :] - self.means[None, :, :]
        maha = np.einsum("nki,kij,nkj->nk", diff, self.precisions, diff)
        logdet = _chol_logdet(self.precisions)
        comp = 0.5 * (logdet - self.dim * _LOG_2PI)[None, :] - 0.5 * maha
        return logsumexp(comp + np.log(self.weights)[None, :], axis=1)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        diff = self.means - mu
        return (
            np.einsum("k,kij->ij", self.weights, self.covariances)
            + np.einsum("k,ki,kj->ij", self.weights, diff, diff)
        )

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }


@dataclass(frozen=True)
class LookupResult:
    """Terminal look-up law at (t, x): mixture over endpoints y."""

    responsibilities: np.ndarray    # (..., K)
    component_means: np.ndarray     # (..., K, d)
    component_precisions: np.ndarray  # (K, d, d)
    pooled_mean: np.ndarray         # (..., d); sum_k rho_k yhat_k


class BridgeContext:
    """Immutable pairing of the two sweep caches with a target mixture and source.

    Per-time component quantities are memoized behind a lock; all evaluation
    methods are pure and safe for concurrent readers.
    """

    def __init__(self, backward: SweepCache, forward: SweepCache,
                 target: GaussianMixture, x0: np.ndarray, epsilon: float):
        if backward.branch != BACKWARD or forward.branch != FORWARD:
            raise ValueError("caches must be (backward, forward)")
        if backward.protocol is not forward.protocol and backward.protocol.dim != forward.protocol.dim:
            raise ValueError("caches built from different protocols")
        if backward.epsilon != forward.epsilon or backward.epsilon != epsilon:
            raise ValueError("caches built with a different epsilon")
        self.backward = backward
        self.forward = forward
        self.target = target
        self.x0 = np.asarray(x0, dtype=float)
        self.epsilon = float(epsilon)
        self.protocol = backward.protocol
        terminal = forward.terminal_snapshot
        self.A_plus_T = terminal.A
        self.B_plus_T = terminal.B
        self.theta_x_plus_T = terminal.tx
        self._memo: dict[float, ComponentBridgeState] = {}
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.protocol.dim

    @property
    def band(self) -> tuple[float, float]:
        return float(self.backward.times[0]), float(self.backward.times[-1])

    def kappa_at(self, t: float) -> float:
        return self.protocol.kappa_at(t)

    def component_quantities(self, t: float) -> ComponentBridgeState:
        t = float(t)
        with self._lock:
            hit = self._memo.get(t)
        if hit is not None:
            return hit
        state = _assemble_component_quantities(self, t)
        with self._lock:
            self._memo.setdefault(t, state)
        return state


def build_bridge_context(protocol: Protocol, target: GaussianMixture,
                         x0: np.ndarray, epsilon: float = 1e-3,
                         with_unit_drives: bool = False,
                         reuse: tuple | None = None,
                         with_zeta: bool = True) -> BridgeContext:
    """Run both sweeps and assemble the evaluation context.

    `reuse=(context, changed)` forwards the incremental-resweep shortcut to both
    sweeps when `protocol` differs from `context.protocol` in one interval only.
    """
    if target.dim != protocol.dim:
        raise ValueError("target dimension does not match protocol dimension")
    bwd_reuse = fwd_reuse = None
    if reuse is not None:
        base, changed = reuse
        bwd_reuse = (base.backward, changed)
        fwd_reuse = (base.forward, changed)
    bwd = run_sweep(protocol, BACKWARD, epsilon, with_unit_drives=with_unit_drives,
                    reuse=bwd_reuse, with_zeta=with_zeta)
    fwd = run_sweep(protocol, FORWARD, epsilon, with_unit_drives=with_unit_drives,
                    reuse=fwd_reuse, with_zeta=with_zeta)
    return BridgeContext(bwd, fwd, target, x0, epsilon)


def _assemble_component_quantities(ctx: BridgeContext, t: float) -> ComponentBridgeState:
    st = ctx.backward.evaluate_at(t, with_zeta=False)
    tgt = ctx.target
    P = tgt.precisions
    S = _sym_batch(st.C[None] + P - ctx.A_plus_T[None])
    try:
        log_det_S = _chol_logdet(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"S_k not positive definite at t={t:g}: t too close to T or inconsistent epsilon"
        ) from exc
    q = st.ty[None] + np.einsum("kij,kj->ki", P, tgt.means) \
        - (ctx.B_plus_T @ ctx.x0)[None] - ctx.theta_x_plus_T[None]
    S_inv = _sym_batch(np.linalg.inv(S))
    B_S_inv = st.B @ S_inv           # (K, d, d) via broadcasting
    Lam = _sym_batch(st.A[None] - np.einsum("kij,lj->kil", B_S_inv, st.B))
    S_inv_q = np.einsum("kij,kj->ki", S_inv, q)
    lam = st.tx[None] + np.einsum("kij,kj->ki", st.B[None], S_inv_q)
    log_omega = (
        np.log(tgt.weights)
        - 0.5 * tgt.log_det_covariances
        - 0.5 * log_det_S
        - 0.5 * np.einsum("ki,kij,kj->k", tgt.means, P, tgt.means)
        + 0.5 * np.einsum("ki,ki->k", q, S_inv_q)
    )
    return ComponentBridgeState(
        t=t, kappa=ctx.kappa_at(t), S=S, S_inv=S_inv, q=q, Lam=Lam, lam=lam,
        log_omega=log_omega, B_minus=st.B, log_det_S=log_det_S, B_S_inv=B_S_inv,
    )


def component_quantities(ctx: BridgeContext, t: float) -> ComponentBridgeState:
    return ctx.component_quantities(t)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _log_psi_components(cq: ComponentBridgeState, X: np.ndarray) -> np.ndarray:
    """(n, K) per-component exponents log omega_k - x'Lam_k x/2 + lam_k'x."""
    quad = np.einsum("ni,kij,nj->nk", X, cq.Lam, X)
    lin = X @ cq.lam.T
    return cq.log_omega[None, :] - 0.5 * quad + lin


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def log_psi(ctx: BridgeContext, t: float, x: np.ndarray) -> np.ndarray | float:
    """log psi(t, x) up to the dropped k-independent constant."""
    X, single = _as_batch(x)
    out = logsumexp(_log_psi_components(ctx.component_quantities(t), X), axis=1)
    return float(out[0]) if single else out


def responsibilities(cq: ComponentBridgeState, X: np.ndarray) -> np.ndarray:
    comp = _log_psi_components(cq, X)
    comp -= logsumexp(comp, axis=1, keepdims=True)
    return np.exp(comp)


def score_field(cq: ComponentBridgeState, X: np.ndarray) -> np.ndarray:
    """Vectorized optimal control u*(x) for a batch X of shape (n, d)."""
    rho = responsibilities(cq, X)
    a = cq.lam[None, :, :] - np.einsum("kij,nj->nki", cq.Lam, X)
    return cq.kappa * np.einsum("nk,nki->ni", rho, a)


def score(ctx: BridgeContext, t: float, x: np.ndarray) -> np.ndarray:
    """Optimal control u*(t, x) = kappa_t grad log psi."""
    X, single = _as_batch(x)
    out = score_field(ctx.component_quantities(t), X)
    return out[0] if single else out


def control_jacobian(cq: ComponentBridgeState, X: np.ndarray) -> np.ndarray:
    """Spatial Jacobian of the control (batched), for stiffness diagnostics.

    d u*/dx = kappa [ -sum_k rho_k Lam_k + Cov_rho(a_k) ], a_k = -Lam_k x + lam_k.
    """
    rho = responsibilities(cq, X)
    a = cq.lam[None, :, :] - np.einsum("kij,nj->nki", cq.Lam, X)
    mean_a = np.einsum("nk,nki->ni", rho, a)
    second = np.einsum("nk,nki,nkj->nij", rho, a, a)
    cov = second - np.einsum("ni,nj->nij", mean_a, mean_a)
    mean_lam = np.einsum("nk,kij->nij", rho, cq.Lam)
    return cq.kappa * (cov - mean_lam)


def marginal(ctx: BridgeContext, t: float) -> MarginalMixture:
    """Exact Gaussian-mixture marginal of the controlled process at time t."""
    cq = ctx.component_quantities(t)
    fwd = ctx.forward.evaluate_at(t, with_zeta=False)
    Pi = _sym_batch(fwd.A[None] + cq.Lam)
    try:
        log_det_Pi = _chol_logdet(Pi)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"marginal precision not SPD at t={t:g}") from exc
    rhs = (fwd.B @ ctx.x0 + fwd.tx)[None, :] + cq.lam
    mu = np.linalg.solve(Pi, rhs[..., None])[..., 0]
    logw = cq.log_omega - 0.5 * log_det_Pi + 0.5 * np.einsum("ki,kij,kj->k", mu, Pi, mu)
    logw -= logsumexp(logw)
    return MarginalMixture(t=t, weights=np.exp(logw), means=mu, precisions=Pi)


def lookup(ctx: BridgeContext, t: float, x: np.ndarray) -> LookupResult:
    """Terminal look-up law and pooled endpoint prediction at (t, x)."""
    X, single = _as_batch(x)
    cq = ctx.component_quantities(t)
    rho = responsibilities(cq, X)
    bx = X @ cq.B_minus  # rows are (B^-)' x, so yhat_k(x) = S_k^-1 ((B^-)' x + q_k)
    yhat = np.einsum("kij,nj->nki", cq.S_inv, bx) + np.einsum("kij,kj->ki", cq.S_inv, cq.q)[None]
    pooled = np.einsum("nk,nki->ni", rho, yhat)
    if single:
        return LookupResult(rho[0], yhat[0], cq.S, pooled[0])
    return LookupResult(rho, yhat, cq.S, pooled)


def gaussian_mixture_to_json(mixtures: list[MarginalMixture]) -> str:
    return json.dumps([m.to_json_dict() for m in mixtures])
