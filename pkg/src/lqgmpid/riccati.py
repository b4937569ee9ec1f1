"""Backward/forward Green-function coefficient cascades for PWC protocols.

The Gaussian--exponential ansatz G(x|y) = exp(-x'Ax/2 + x'By - y'Cy/2 + theta_x'x
+ theta_y'y + zeta) reduces each branch of the linearized bridge PDEs to matrix
Riccati/linear ODEs with piecewise-constant coefficients.  On each interval the flow
is generated by a constant 2d x 2d block matrix M; with Phi = exp(M tau) and
X = Phi11 + Phi12 A0, Y = Phi21 + Phi22 A0 the update is

    A(tau) = Y X^-1                       (matrix Riccati flow)
    B(tau) = X^-T B0
    C(tau) = C0 - B0' (X^-1 Phi12) B0     (closed form; X^-1 Phi12 = kappa Int X^-1 X^-T)
    theta_x(tau) = X^-T (theta_x0 + phi(tau)),  phi(tau) = (J1' + A0 J2') g
    theta_y(tau) = theta_y0 + B0' [F(tau)(theta_x0 + phi(tau)) - Int_0^tau F X' ds g]
    zeta(tau) = zeta0 - (log det X + tau tr sigma)/2 - tau nu'beta nu/2
                + (kappa/2) Int ||theta_x||^2 ds

where J_i(tau) = Int_0^tau Phi_{1i}(s) ds, F(s) = X(s)^-1 Phi12(s), and g = beta nu
is the drive.  The same formulas serve both branches; only M differs:
M = [[-sigma, kappa I], [beta, sigma']] backward (elapsed time runs leftward) and
M = [[sigma, kappa I], [beta, -sigma']] forward.  The F X' integrand is smooth even
through the delta boundary layer (integration by parts removes the singular factor),
and is integrated by Gauss--Legendre quadrature with adaptive doubling; when the
interval admits a scalar-drift/zero-drift/isotropic mode decomposition and the
incoming A is diagonal in that basis, theta_y uses the exact per-mode closed form
(Int F X' ds = J2 there) and no quadrature is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .protocol import Protocol, ProtocolInterval, SpecialCase, classify_interval

__all__ = [
    "CoefficientState",
    "SweepCache",
    "HamiltonianBlocks",
    "matrix_exponential",
    "hamiltonian_blocks",
    "backward_interval_update",
    "forward_interval_update",
    "run_sweep",
    "evaluate_at",
]

BACKWARD = "backward"
FORWARD = "forward"

_QUAD_TOL = 1e-9
_QUAD_MAX_DEPTH = 8


class SingularTransitionError(RuntimeError):
    """X = Phi11 + Phi12*A became numerically singular on an interval."""


def matrix_exponential(M: np.ndarray) -> np.ndarray:
    """exp(M) for the (augmented) block systems; n <= 3*d."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix_exponential: non-finite entries")
    return sla.expm(M)


@lru_cache(maxsize=None)
def _gl_rule(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _gl_nodes(a: float, b: float, n: int):
    x, w = _gl_rule(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _shc(x: np.ndarray) -> np.ndarray:
    """sinh(x)/x, stable at 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    out = np.where(small, 1.0 + x * x / 6.0, np.sinh(xs) / xs)
    return out


def _chm1(x: np.ndarray) -> np.ndarray:
    """(cosh(x) - 1)/x^2, stable at 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    out = np.where(small, 0.5 + x * x / 24.0, (np.cosh(xs) - 1.0) / (xs * xs))
    return out


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientState:
    """Coefficients (A, B, C, theta_x, theta_y, zeta) of one branch at time t.

    theta_x/theta_y are stored as (d, m) column stacks: column 0 is the physical
    drive response; columns 1..d (present when a sweep is run with unit drives)
    are the responses to the unit guide drives nu = e_j used by the shift
    propagators.
    """

    branch: str
    t: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    theta_x: np.ndarray
    theta_y: np.ndarray
    zeta: float

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def tx(self) -> np.ndarray:
        """Physical theta_x as a d-vector."""
        return self.theta_x[:, 0]

    @property
    def ty(self) -> np.ndarray:
        """Physical theta_y as a d-vector."""
        return self.theta_y[:, 0]


@dataclass(frozen=True)
class HamiltonianBlocks:
    """Transition blocks Phi_ij(tau) and drive-response integrals J_i(tau).

    J_i(tau) = Int_0^tau Phi_{1i}(s) ds; the augmented matrix
    [[Phi, 0], [J, I]] obeys the semigroup law blocks(t1+t2) = blocks(t2) @ blocks(t1).
    """

    tau: float
    Phi11: np.ndarray
    Phi12: np.ndarray
    Phi21: np.ndarray
    Phi22: np.ndarray
    J1: np.ndarray
    J2: np.ndarray

    def full_matrix(self) -> np.ndarray:
        d = self.Phi11.shape[0]
        out = np.zeros((3 * d, 3 * d))
        out[:d, :d] = self.Phi11
        out[:d, d:2 * d] = self.Phi12
        out[d:2 * d, :d] = self.Phi21
        out[d:2 * d, d:2 * d] = self.Phi22
        out[2 * d:, :d] = self.J1
        out[2 * d:, d:2 * d] = self.J2
        out[2 * d:, 2 * d:] = np.eye(d)
        return out


# ---------------------------------------------------------------------------
# Block providers
# ---------------------------------------------------------------------------


class _ModeBlockProvider:
    """Closed-form hyperbolic blocks for sigma = c*I intervals (per-mode 2x2 flow)."""

    def __init__(self, special: SpecialCase, kappa: float, branch: str):
        self.c = float(special.c)
        self.lam = np.asarray(special.eigvals, dtype=float)
        self.Q = np.asarray(special.eigvecs, dtype=float)
        self.kappa = float(kappa)
        # Backward flow matrix has -c in the (1,1) slot, forward has +c.
        self.c_sign = -1.0 if branch == BACKWARD else +1.0
        self.w = np.sqrt(np.maximum(self.kappa * self.lam + self.c * self.c, 0.0))
        self.is_mode = True

    def mode_blocks(self, taus: np.ndarray):
        """Diagonal (in the beta eigenbasis) block entries, shape (n, d) each."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        x = taus[:, None] * self.w[None, :]
        ch = np.cosh(x)
        sh_w = taus[:, None] * _shc(x)          # sinh(w tau)/w
        ch1_w2 = taus[:, None] ** 2 * _chm1(x)  # (cosh(w tau)-1)/w^2
        cs = self.c_sign * self.c
        phi11 = ch + cs * sh_w
        phi22 = ch - cs * sh_w
        phi12 = self.kappa * sh_w
        phi21 = self.lam[None, :] * sh_w
        j1 = sh_w + cs * ch1_w2
        j2 = self.kappa * ch1_w2
        return phi11, phi12, phi21, phi22, j1, j2

    def blocks(self, taus: np.ndarray):
        phi11, phi12, phi21, phi22, j1, j2 = self.mode_blocks(taus)
        Q = self.Q

        def rot(vals):
            return np.einsum("ij,nj,kj->nik", Q, vals, Q)

        return rot(phi11), rot(phi12), rot(phi21), rot(phi22), rot(j1), rot(j2)


class _GeneralBlockProvider:
    """Eigendecomposition (with expm fallback) blocks for general-sigma intervals."""

    def __init__(self, interval: ProtocolInterval, branch: str):
        d = interval.dim
        self.d = d
        kap = interval.kappa
        sig = interval.sigma
        beta = 0.5 * (interval.beta + interval.beta.T)
        s = -1.0 if branch == BACKWARD else 1.0
        M = np.zeros((2 * d, 2 * d))
        M[:d, :d] = s * sig
        M[:d, d:] = kap * np.eye(d)
        M[d:, :d] = beta
        M[d:, d:] = -s * sig.T
        self.M = M
        self.is_mode = False
        self._eig_ok = False
        try:
            lam, V = np.linalg.eig(M)
            Vinv = np.linalg.inv(V)
            recon = (V * lam) @ Vinv
            scale = max(1.0, np.abs(M).max())
            if np.max(np.abs(recon.real - M)) <= 1e-12 * scale and np.max(np.abs(recon.imag)) <= 1e-12 * scale:
                self.lam, self.V, self.Vinv = lam, V, Vinv
                self._eig_ok = True
        except np.linalg.LinAlgError:
            pass

    def _exp_and_int(self, taus: np.ndarray):
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        n, d = len(taus), self.d
        if self._eig_ok:
            z = taus[:, None] * self.lam[None, :]
            ez = np.exp(z)
            E = np.einsum("ij,nj,jk->nik", self.V, ez, self.Vinv).real
            small = np.abs(z) < 1e-8
            lam_safe = np.where(np.abs(self.lam) < 1e-300, 1.0, self.lam)
            iz = np.where(small, taus[:, None] * (1.0 + 0.5 * z), np.expm1(z) / lam_safe[None, :])
            Ei = np.einsum("ij,nj,jk->nik", self.V, iz, self.Vinv).real
            return E, Ei[:, :d, :]
        # expm fallback on the (3d x 3d) augmented matrix [[M, 0], [I 0, 0]].
        E = np.empty((n, 2 * d, 2 * d))
        J = np.empty((n, d, 2 * d))
        N = np.zeros((3 * d, 3 * d))
        N[: 2 * d, : 2 * d] = self.M
        N[2 * d:, :d] = np.eye(d)
        for i, tau in enumerate(taus):
            eN = sla.expm(N * tau)
            E[i] = eN[: 2 * d, : 2 * d]
            J[i] = eN[2 * d:, : 2 * d]
        return E, J

    def blocks(self, taus: np.ndarray):
        d = self.d
        E, J = self._exp_and_int(taus)
        return (
            E[:, :d, :d],
            E[:, :d, d:],
            E[:, d:, :d],
            E[:, d:, d:],
            J[:, :, :d],
            J[:, :, d:],
        )


# ---------------------------------------------------------------------------
# Interval solver
# ---------------------------------------------------------------------------


class IntervalSolver:
    """Propagates a coefficient state across (part of) one protocol interval."""

    def __init__(self, interval: ProtocolInterval, branch: str):
        if branch not in (BACKWARD, FORWARD):
            raise ValueError(f"unknown branch {branch!r}")
        self.interval = interval
        self.branch = branch
        self.d = interval.dim
        self.kappa = interval.kappa
        self.special = classify_interval(interval)
        if self.special.tag == "General":
            self.provider = _GeneralBlockProvider(interval, branch)
            self.force_general = True
        else:
            self.provider = _ModeBlockProvider(self.special, interval.kappa, branch)
            self.force_general = False
        beta = 0.5 * (interval.beta + interval.beta.T)
        nu = interval.nu
        # Drive columns: physical drive beta@nu, then unit drives beta@e_j.
        self.G_full = np.concatenate([(beta @ nu)[:, None], beta], axis=1)
        self.tr_sigma = float(np.trace(interval.sigma))
        self.nu_beta_nu = float(nu @ beta @ nu)

    # -- quadrature -----------------------------------------------------

    def _node_integrands(self, s: np.ndarray, A0, tx0, G, with_zeta=True):
        """Per-node FX'G (for theta_y) and ||theta_x||^2 (for zeta)."""
        phi11, phi12, _, _, j1, j2 = self.provider.blocks(s)
        X = phi11 + phi12 @ A0
        F = np.linalg.solve(X, phi12)
        fxg = F @ np.swapaxes(X, -1, -2) @ G
        if not with_zeta:
            return fxg, np.zeros(len(s))
        phi = (np.swapaxes(j1, -1, -2) + A0 @ np.swapaxes(j2, -1, -2)) @ G
        theta = np.linalg.solve(np.swapaxes(X, -1, -2), tx0 + phi)
        th2 = np.einsum("ni,ni->n", theta[:, :, 0], theta[:, :, 0])
        return fxg, th2

    def _panel(self, a, b, A0, tx0, G, depth, with_zeta=True):
        s16, w16 = _gl_nodes(a, b, 16)
        s8, w8 = _gl_nodes(a, b, 8)
        fx, th2 = self._node_integrands(np.concatenate([s16, s8]), A0, tx0, G,
                                        with_zeta=with_zeta)
        q16 = np.einsum("n,nij->ij", w16, fx[:16])
        i16 = float(w16 @ th2[:16])
        q8 = np.einsum("n,nij->ij", w8, fx[16:])
        i8 = float(w8 @ th2[16:])
        err = max(np.max(np.abs(q16 - q8)), abs(i16 - i8))
        scale = 1.0 + max(np.max(np.abs(q16)), abs(i16))
        if err <= _QUAD_TOL * scale or depth >= _QUAD_MAX_DEPTH:
            return q16, i16
        mid = 0.5 * (a + b)
        qa, ia = self._panel(a, mid, A0, tx0, G, depth + 1, with_zeta=with_zeta)
        qb, ib = self._panel(mid, b, A0, tx0, G, depth + 1, with_zeta=with_zeta)
        return qa + qb, ia + ib

    def _quadrature(self, tau, A0, tx0, G, with_zeta=True):
        """Adaptive GL quadrature of (Int F X' ds G, Int ||theta_x||^2 ds)."""
        scale = self.kappa * float(np.linalg.norm(A0))
        edges = [0.0]
        if scale * tau > 20.0:
            s0 = 1.0 / scale
            e = s0
            while e < tau / 4.0 and len(edges) < 8:
                edges.append(e)
                e *= 4.0
        edges.append(tau)
        Qg = np.zeros_like(G)
        Ith = 0.0 if with_zeta else math.nan
        for a, b in zip(edges[:-1], edges[1:]):
            q, i = self._panel(a, b, A0, tx0, G, 0, with_zeta=with_zeta)
            Qg += q
            if with_zeta:
                Ith += i
        return Qg, Ith

    # -- main update -----------------------------------------------------

    def propagate(self, state: CoefficientState, tau: float,
                  with_zeta: bool = True) -> CoefficientState:
        """State at elapsed time tau into the interval (leftward for the backward
        branch, rightward for the forward branch).

        `with_zeta=False` skips the quadrature for the log-normalizer accumulator
        (the only coefficient requiring numerical integration) and reports
        `zeta = nan`; every other coefficient is unaffected.  Use it for interior
        evaluations whose consumers read only (A, B, C, theta) -- e.g. marginal
        moments, whose mixture weights are invariant to the branch-wide
        normalizer by construction.
        """
        if tau == 0.0:
            return state
        d = self.d
        A0, B0, C0 = state.A, state.B, state.C
        tx0, ty0 = state.theta_x, state.theta_y
        m = tx0.shape[1]
        G = self.G_full[:, :m]

        decoupled = False
        if not self.force_general:
            Q = self.provider.Q
            Abar = Q.T @ A0 @ Q
            off = Abar - np.diag(np.diag(Abar))
            decoupled = np.max(np.abs(off)) <= 1e-12 * (1.0 + np.max(np.abs(Abar)))

        phi11, phi12, phi21, phi22, j1, j2 = (b[0] for b in self.provider.blocks([tau]))
        X = phi11 + phi12 @ A0
        Y = phi21 + phi22 @ A0
        try:
            lu = sla.lu_factor(X)
        except sla.LinAlgError as exc:  # pragma: no cover - defensive
            raise SingularTransitionError(str(exc)) from exc
        if not np.all(np.isfinite(lu[0])):
            raise SingularTransitionError("non-finite LU factors of X")
        diagU = np.abs(np.diag(lu[0]))
        if diagU.min() <= 1e-14 * max(1.0, diagU.max()):
            raise SingularTransitionError(
                f"transition matrix X numerically singular at tau={tau:g}"
            )

        A1 = _sym(sla.lu_solve(lu, Y.T, trans=1).T)
        B1 = sla.lu_solve(lu, B0, trans=1)
        F_tau = sla.lu_solve(lu, phi12)
        C1 = _sym(C0 - B0.T @ F_tau @ B0)
        phi_tau = (j1.T + A0 @ j2.T) @ G
        tx1 = sla.lu_solve(lu, tx0 + phi_tau, trans=1)

        if decoupled:
            Qb = self.provider.Q
            bph11, bph12, _, _, bj1, bj2 = (b[0] for b in self.provider.mode_blocks([tau]))
            Xbar = bph11 + bph12 * np.diag(Qb.T @ A0 @ Qb)
            Fbar = bph12 / Xbar
            tx0_bar = Qb.T @ (tx0 + phi_tau)
            Gbar = Qb.T @ G
            ty1 = ty0 + B0.T @ (Qb @ (Fbar[:, None] * tx0_bar - bj2[:, None] * Gbar))
            Ith = (self._quadrature_zeta_only(tau, A0, tx0, G)[1]
                   if with_zeta else math.nan)
        else:
            Qg, Ith = self._quadrature(tau, A0, tx0, G, with_zeta=with_zeta)
            ty1 = ty0 + B0.T @ (F_tau @ (tx0 + phi_tau) - Qg)

        sign, logdet = np.linalg.slogdet(X)
        if sign <= 0:
            raise SingularTransitionError("transition matrix X lost positivity of det")
        z1 = (
            state.zeta
            - 0.5 * (logdet + tau * self.tr_sigma)
            - 0.5 * tau * self.nu_beta_nu
            + 0.5 * self.kappa * Ith
        )
        dt = -tau if self.branch == BACKWARD else tau
        return CoefficientState(
            branch=state.branch, t=state.t + dt,
            A=A1, B=B1, C=C1, theta_x=tx1, theta_y=ty1, zeta=float(z1),
        )

    def _quadrature_zeta_only(self, tau, A0, tx0, G):
        """||theta_x||^2 integral via per-mode diagonal evaluation (decoupled case)."""
        Qb = self.provider.Q
        abar = np.diag(Qb.T @ A0 @ Qb)
        txb = Qb.T @ tx0[:, :1]
        gb = Qb.T @ G[:, :1]

        def panel(a, b, depth):
            s16, w16 = _gl_nodes(a, b, 16)
            s8, w8 = _gl_nodes(a, b, 8)
            s = np.concatenate([s16, s8])
            ph11, ph12, _, _, bj1, bj2 = self.provider.mode_blocks(s)
            Xb = ph11 + ph12 * abar[None, :]
            phib = (bj1 + bj2 * abar[None, :]) * gb[:, 0][None, :]
            thb = (txb[:, 0][None, :] + phib) / Xb
            th2 = np.sum(thb * thb, axis=1)
            i16 = float(w16 @ th2[:16])
            i8 = float(w8 @ th2[16:])
            if abs(i16 - i8) <= _QUAD_TOL * (1.0 + abs(i16)) or depth >= _QUAD_MAX_DEPTH:
                return i16
            mid = 0.5 * (a + b)
            return panel(a, mid, depth + 1) + panel(mid, b, depth + 1)

        return None, panel(0.0, tau, 0)

    def blocks_at(self, tau: float) -> HamiltonianBlocks:
        phi11, phi12, phi21, phi22, j1, j2 = (b[0] for b in self.provider.blocks([tau]))
        return HamiltonianBlocks(
            tau=tau, Phi11=phi11, Phi12=phi12, Phi21=phi21, Phi22=phi22, J1=j1, J2=j2
        )


def hamiltonian_blocks(interval: ProtocolInterval, branch: str, tau: float,
                       force_general: bool = False) -> HamiltonianBlocks:
    """Transition/drive blocks of one interval at elapsed time tau."""
    solver = IntervalSolver(interval, branch)
    if force_general and not solver.force_general:
        solver.provider = _GeneralBlockProvider(interval, branch)
        solver.force_general = True
    return solver.blocks_at(tau)


def backward_interval_update(state_right: CoefficientState, interval: ProtocolInterval,
                             tau: float, force_general: bool = False) -> CoefficientState:
    """Backward state at t = t_right - tau from the state at the interval's right end."""
    solver = IntervalSolver(interval, BACKWARD)
    if force_general:
        solver.provider = _GeneralBlockProvider(interval, BACKWARD)
        solver.force_general = True
    return solver.propagate(state_right, tau)


def forward_interval_update(state_left: CoefficientState, interval: ProtocolInterval,
                            tau: float, force_general: bool = False) -> CoefficientState:
    """Forward state at t = t_left + tau from the state at the interval's left end."""
    solver = IntervalSolver(interval, FORWARD)
    if force_general:
        solver.provider = _GeneralBlockProvider(interval, FORWARD)
        solver.force_general = True
    return solver.propagate(state_left, tau)


# ---------------------------------------------------------------------------
# Sweeps and caches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCache:
    """Coefficient states at every breakpoint of the working band [eps, T-eps]."""

    branch: str
    epsilon: float
    protocol: Protocol
    times: np.ndarray
    states: tuple
    solvers: tuple
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.protocol.dim

    @property
    def terminal_snapshot(self) -> CoefficientState:
        """Forward state at T-eps (the terminal triple used by the bridge)."""
        if self.branch != FORWARD:
            raise ValueError("terminal snapshot is defined for the forward branch")
        return self.states[-1]

    def evaluate_at(self, t: float, with_zeta: bool = True) -> CoefficientState:
        return evaluate_at(self, t, with_zeta=with_zeta)

    def to_debug_dict(self) -> dict:
        return {
            "branch": self.branch,
            "epsilon": self.epsilon,
            "times": [float(t) for t in self.times],
            "states": [
                {
                    "t": float(s.t),
                    "A": s.A.tolist(),
                    "B": s.B.tolist(),
                    "C": s.C.tolist(),
                    "theta_x": s.theta_x.tolist(),
                    "theta_y": s.theta_y.tolist(),
                    "zeta": float(s.zeta),
                }
                for s in self.states
            ],
        }


def _band_times(protocol: Protocol, epsilon: float) -> np.ndarray:
    b = protocol.grid.breakpoints.copy()
    min_len = np.diff(b).min()
    if not (0.0 < epsilon < 0.5 * min_len):
        raise ValueError(f"epsilon {epsilon} outside (0, {0.5 * min_len})")
    b[0] = epsilon
    b[-1] = b[-1] - epsilon
    return b


def run_sweep(protocol: Protocol, branch: str, epsilon: float = 1e-3,
              with_unit_drives: bool = False,
              reuse: tuple | None = None,
              with_zeta: bool = True) -> SweepCache:
    """Chain the interval updates across the working band, caching breakpoint states.

    `reuse=(cache, changed)` declares that `protocol` differs from `cache.protocol`
    in interval `changed` only; the caller is responsible for that claim.  The
    unaffected side of the chain (right of `changed` backward, left of it forward)
    is taken from the cache, so single-interval perturbations (e.g. finite-
    difference probes) cost O(1) interval updates on average instead of O(K).
    """
    d = protocol.dim
    K = protocol.grid.K
    band = _band_times(protocol, epsilon)
    m = 1 + (d if with_unit_drives else 0)
    changed = None
    if reuse is not None:
        base, changed = reuse
        if (base.branch != branch or base.epsilon != epsilon
                or base.protocol.grid.K != K or base.dim != d
                or base.states[0].theta_x.shape[1] != m
                or not (0 <= changed < K)):
            raise ValueError("reuse cache incompatible with the requested sweep")
        solvers = tuple(
            IntervalSolver(iv, branch) if k == changed else base.solvers[k]
            for k, iv in enumerate(protocol.intervals)
        )
    else:
        solvers = tuple(IntervalSolver(iv, branch) for iv in protocol.intervals)

    def boundary_state(t: float, kappa: float) -> CoefficientState:
        big = np.eye(d) / (kappa * epsilon)
        return CoefficientState(
            branch=branch, t=t, A=big.copy(), B=big.copy(), C=big.copy(),
            theta_x=np.zeros((d, m)), theta_y=np.zeros((d, m)), zeta=0.0,
        )

    states: list[CoefficientState | None] = [None] * (K + 1)
    try:
        if branch == BACKWARD:
            if changed is not None:
                states[changed + 1:] = reuse[0].states[changed + 1:]
            else:
                states[K] = boundary_state(band[-1], protocol.intervals[-1].kappa)
            first = K - 1 if changed is None else changed
            for k in range(first, -1, -1):
                tau = band[k + 1] - band[k]
                states[k] = solvers[k].propagate(states[k + 1], tau, with_zeta=with_zeta)
        else:
            if changed is not None:
                states[:changed + 1] = reuse[0].states[:changed + 1]
            else:
                states[0] = boundary_state(band[0], protocol.intervals[0].kappa)
            first = 0 if changed is None else changed
            for k in range(first, K):
                tau = band[k + 1] - band[k]
                states[k + 1] = solvers[k].propagate(states[k], tau, with_zeta=with_zeta)
    except SingularTransitionError as exc:
        raise SingularTransitionError(f"{branch} sweep, interval {k}: {exc}") from exc
    cache = SweepCache(
        branch=branch, epsilon=epsilon, protocol=protocol,
        times=band, states=tuple(states), solvers=solvers,
    )
    if changed is not None:
        # Interior states memoized on the base in intervals unaffected by the
        # change (right of it backward, left of it forward) are still exact.
        for key, st in reuse[0]._memo.items():
            k_t = min(max(int(np.searchsorted(band, key[0], side="right") - 1), 0),
                      K - 1)
            if (k_t > changed) if branch == BACKWARD else (k_t < changed):
                cache._memo[key] = st
    return cache


def evaluate_at(cache: SweepCache, t: float,
                with_zeta: bool = True) -> CoefficientState:
    """Exact coefficient state at any query time in the working band.

    Interior (non-breakpoint) states are memoized on the cache, so repeated
    queries at the same time cost one dict lookup.  `with_zeta=False` skips the
    log-normalizer quadrature for interior states (reported as `zeta = nan`);
    breakpoint states always carry the exact zeta from the sweep.
    """
    band = cache.times
    if t < band[0] - 1e-12 or t > band[-1] + 1e-12:
        raise ValueError(f"t = {t} outside the working band [{band[0]}, {band[-1]}]")
    t = float(min(max(t, band[0]), band[-1]))
    k = int(np.searchsorted(band, t, side="right") - 1)
    k = min(max(k, 0), len(band) - 2)
    # Snap to cached breakpoint states (tolerance absorbs float-grid mismatch).
    if abs(t - band[k]) <= 1e-12:
        return cache.states[k]
    if abs(t - band[k + 1]) <= 1e-12:
        return cache.states[k + 1]
    key = (t, with_zeta)
    hit = cache._memo.get(key)
    if hit is not None:
        return hit
    if cache.branch == BACKWARD:
        state = cache.solvers[k].propagate(cache.states[k + 1], band[k + 1] - t,
                                           with_zeta=with_zeta)
    else:
        state = cache.solvers[k].propagate(cache.states[k], t - band[k],
                                           with_zeta=with_zeta)
    cache._memo[key] = state
    return state
