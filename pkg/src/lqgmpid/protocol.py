"""Piecewise-constant protocols: representation, validation, classification, builders.

A protocol is the tuple Gamma_t = (beta_t, nu_t, sigma_t, kappa_t) held constant on
each interval of a breakpoint grid 0 = t_0 < t_1 < ... < t_K = T.  This module owns
the protocol data model, its invariants, the special-case classification used by the
coefficient solvers, the corridor (S-detour) parameterization, the hierarchical
trunk/branch/local builders, and the fixed smooth sigma schedules.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "TimeGrid",
    "ProtocolInterval",
    "Protocol",
    "SpecialCase",
    "CorridorGeometry",
    "Violation",
    "validate",
    "classify_interval",
    "build_corridor_protocol",
    "build_baseline_protocol",
    "build_hierarchical_protocol",
    "build_sigma_schedule",
    "protocol_to_json",
    "protocol_from_json",
]

_SYM_TOL = 1e-10
_PSD_TOL = -1e-10


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing breakpoints t_0 = 0 < ... < t_K = T."""

    breakpoints: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", _as_readonly(self.breakpoints))

    @property
    def K(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def midpoints(self) -> np.ndarray:
        b = self.breakpoints
        return 0.5 * (b[:-1] + b[1:])

    @staticmethod
    def uniform(K: int, T: float = 1.0) -> "TimeGrid":
        return TimeGrid(np.linspace(0.0, T, K + 1))

    def interval_of(self, t: float) -> int:
        """Index k with t in [t_k, t_{k+1}] (right-closed on the last interval)."""
        b = self.breakpoints
        k = int(np.searchsorted(b, t, side="right") - 1)
        return min(max(k, 0), self.K - 1)


@dataclass(frozen=True)
class ProtocolInterval:
    """Constant (beta, nu, sigma, kappa) on one grid interval."""

    beta: np.ndarray
    nu: np.ndarray
    sigma: np.ndarray
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_readonly(self.beta))
        object.__setattr__(self, "nu", _as_readonly(np.atleast_1d(self.nu)))
        object.__setattr__(self, "sigma", _as_readonly(self.sigma))
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self) -> int:
        return len(self.nu)


@dataclass(frozen=True)
class Protocol:
    grid: TimeGrid
    intervals: tuple
    dim: int = -1

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(self.intervals))
        if self.dim < 0:
            if not self.intervals:
                raise ValueError("cannot infer dim from an empty interval list")
            object.__setattr__(self, "dim", self.intervals[0].dim)

    def __len__(self) -> int:
        return len(self.intervals)

    def interval_at(self, t: float) -> ProtocolInterval:
        return self.intervals[self.grid.interval_of(t)]

    def kappa_at(self, t: float) -> float:
        return self.interval_at(t).kappa


@dataclass(frozen=True)
class SpecialCase:
    """Most specific solver class an interval admits.

    tag is one of "Isotropic", "ZeroDriftMatrix", "ScalarDriftDiagonal", "General".
    For the first three, sigma = c*I and beta = Q diag(eigvals) Q^T; the per-mode
    frequencies are w_i = sqrt(kappa*eigvals_i + c^2).
    """

    tag: str
    b: float | None = None
    c: float | None = None
    eigvals: np.ndarray | None = None
    eigvecs: np.ndarray | None = None


@dataclass(frozen=True)
class Violation:
    index: int | None
    fieldname: str
    message: str

    def __str__(self) -> str:
        where = "grid" if self.index is None else f"interval {self.index}"
        return f"{where}.{self.fieldname}: {self.message}"


def validate(protocol: Protocol) -> list[Violation]:
    """Return every invariant violation (empty list iff the protocol is valid)."""
    out: list[Violation] = []
    b = protocol.grid.breakpoints
    if len(b) < 2:
        out.append(Violation(None, "breakpoints", "need at least two breakpoints"))
        return out
    if abs(b[0]) > 0.0:
        out.append(Violation(None, "breakpoints", "first breakpoint must be 0"))
    if not np.all(np.diff(b) > 0):
        out.append(Violation(None, "breakpoints", "breakpoints must strictly increase"))
    if b[-1] <= 0:
        out.append(Violation(None, "breakpoints", "horizon T must be positive"))
    if len(protocol.intervals) != protocol.grid.K:
        out.append(
            Violation(None, "intervals", f"expected {protocol.grid.K} intervals, got {len(protocol.intervals)}")
        )
        return out
    for k, iv in enumerate(protocol.intervals):
        d = protocol.dim
        if iv.dim != d or iv.beta.shape != (d, d) or iv.sigma.shape != (d, d):
            out.append(Violation(k, "dim", f"interval dimension mismatch with protocol dim {d}"))
            continue
        if not np.all(np.isfinite(iv.beta)) or not np.all(np.isfinite(iv.sigma)) or not np.all(np.isfinite(iv.nu)):
            out.append(Violation(k, "beta/nu/sigma", "non-finite entries"))
            continue
        asym = np.max(np.abs(iv.beta - iv.beta.T)) if d else 0.0
        if asym > _SYM_TOL:
            out.append(Violation(k, "beta", f"not symmetric (max asymmetry {asym:.3e})"))
        else:
            lam_min = float(np.linalg.eigvalsh(0.5 * (iv.beta + iv.beta.T)).min()) if d else 0.0
            if lam_min < _PSD_TOL:
                out.append(Violation(k, "beta", f"not PSD (min eigenvalue {lam_min:.3e})"))
        if not (iv.kappa > 0):
            out.append(Violation(k, "kappa", "must be strictly positive"))
    return out


def classify_interval(interval: ProtocolInterval) -> SpecialCase:
    """Classify an interval by the most specific closed-form solver it admits."""
    d = interval.dim
    sig = interval.sigma
    c = float(np.trace(sig)) / d
    if np.max(np.abs(sig - c * np.eye(d))) > 1e-13:
        return SpecialCase(tag="General")
    beta = 0.5 * (interval.beta + interval.beta.T)
    if abs(c) <= 1e-13:
        c = 0.0
        bscal = float(np.trace(beta)) / d
        if np.max(np.abs(beta - bscal * np.eye(d))) <= 1e-13:
            return SpecialCase(
                tag="Isotropic", b=bscal, c=0.0,
                eigvals=np.full(d, bscal), eigvecs=np.eye(d),
            )
        lam, Q = np.linalg.eigh(beta)
        return SpecialCase(tag="ZeroDriftMatrix", c=0.0, eigvals=lam, eigvecs=Q)
    if np.max(np.abs(beta - np.diag(np.diag(beta)))) <= 1e-13:
        lam, Q = np.diag(beta).copy(), np.eye(d)
    else:
        lam, Q = np.linalg.eigh(beta)
    return SpecialCase(tag="ScalarDriftDiagonal", c=c, eigvals=lam, eigvecs=Q)


# ---------------------------------------------------------------------------
# Corridor (S-detour) geometry and builders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorridorGeometry:
    """S-shaped corridor midline m(s) with a local tangent/normal frame.

    m(s) = (endpoint_scale*s, amplitude*[tanh(steepness*(s-0.30))
            - tanh(steepness*(s-0.70))] - y0) with y0 chosen so m(0) is the origin
    and m(1) = (endpoint_scale, 0) exactly.
    """

    amplitude: float = 0.7
    steepness: float = 6.0
    endpoint_scale: float = 3.0
    width_parallel: float = 0.8
    width_perp: float = 0.2

    @property
    def _y0(self) -> float:
        k = self.steepness
        return self.amplitude * (math.tanh(0.7 * k) - math.tanh(0.3 * k))

    def midline(self, s):
        s = np.asarray(s, dtype=float)
        k = self.steepness
        y = self.amplitude * (np.tanh(k * (s - 0.30)) - np.tanh(k * (s - 0.70))) - self._y0
        return np.stack([self.endpoint_scale * s, y], axis=-1)

    def tangent(self, s):
        s = np.asarray(s, dtype=float)
        k = self.steepness
        dy = self.amplitude * k * (np.cosh(k * (s - 0.30)) ** -2 - np.cosh(k * (s - 0.70)) ** -2)
        dx = np.full_like(dy, self.endpoint_scale)
        v = np.stack([dx, dy], axis=-1)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def normal(self, s):
        t = self.tangent(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)

    def frame(self, s) -> np.ndarray:
        """Orthonormal Q(s) = [t(s) | n(s)] (2x2, or batched)."""
        return np.stack([self.tangent(s), self.normal(s)], axis=-1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def build_corridor_protocol(
    geometry: CorridorGeometry,
    rho: Sequence[float],
    c: Sequence[float],
    beta_parallel: float = 0.2,
    beta_band: tuple = (2.0, 60.0),
    kappa: float = 1.0,
    sigma_schedule: Sequence[np.ndarray] | None = None,
) -> Protocol:
    """Corridor-aligned anisotropic protocol on a uniform K-interval grid.

    Interval k has nu_k = m(s_k) + rho_k * n(s_k) at s_k = (k - 1/2)/K and
    beta_k = Q_k diag(beta_parallel, beta_perp_k) Q_k^T with
    beta_perp_k = band_min + (band_max - band_min) * sigmoid(c_k).
    """
    rho = np.asarray(rho, dtype=float)
    c = np.asarray(c, dtype=float)
    if rho.shape != c.shape or rho.ndim != 1:
        raise ValueError(f"rho and c must be 1-D with equal length, got {rho.shape} and {c.shape}")
    K = len(rho)
    if sigma_schedule is not None and len(sigma_schedule) != K:
        raise ValueError(f"sigma schedule length {len(sigma_schedule)} != K = {K}")
    grid = TimeGrid.uniform(K)
    s = (np.arange(K) + 0.5) / K
    m = geometry.midline(s)
    n = geometry.normal(s)
    Q = geometry.frame(s)
    lo, hi = beta_band
    beta_perp = lo + (hi - lo) * _sigmoid(c)
    intervals = []
    for k in range(K):
        diag = np.diag([beta_parallel, beta_perp[k]])
        beta = Q[k] @ diag @ Q[k].T
        beta = 0.5 * (beta + beta.T)
        sig = np.zeros((2, 2)) if sigma_schedule is None else np.asarray(sigma_schedule[k], dtype=float)
        intervals.append(ProtocolInterval(beta=beta, nu=m[k] + rho[k] * n[k], sigma=sig, kappa=kappa))
    return Protocol(grid=grid, intervals=tuple(intervals), dim=2)


def build_baseline_protocol(
    geometry: CorridorGeometry,
    K: int = 10,
    beta_iso: float = 3.0,
    kappa: float = 1.0,
    sigma_schedule: Sequence[np.ndarray] | None = None,
    guide: str = "midline",
) -> Protocol:
    """Untuned reference protocol: isotropic stiffness around a fixed guide.

    `guide="midline"` follows the corridor midline at each interval midpoint
    (the reference configuration the corridor-loss comparisons are quoted
    against); `guide="straight"` uses the straight chord origin ->
    (endpoint_scale, 0).
    """
    if guide not in ("midline", "straight"):
        raise ValueError(f"unknown guide {guide!r}; expected 'midline' or 'straight'")
    grid = TimeGrid.uniform(K)
    s = (np.arange(K) + 0.5) / K
    nus = geometry.midline(s) if guide == "midline" else np.column_stack(
        [geometry.endpoint_scale * s, np.zeros(K)]
    )
    intervals = []
    for k in range(K):
        sig = np.zeros((2, 2)) if sigma_schedule is None else np.asarray(sigma_schedule[k], dtype=float)
        intervals.append(
            ProtocolInterval(
                beta=beta_iso * np.eye(2),
                nu=nus[k],
                sigma=sig,
                kappa=kappa,
            )
        )
    return Protocol(grid=grid, intervals=tuple(intervals), dim=2)


def build_hierarchical_protocol(
    d_T: int,
    d_B: int,
    d_L: int,
    variant: str,
    mu_trunk: np.ndarray | None = None,
    t_star: float = 0.5,
    K: int = 12,
    kappa: float = 1.0,
) -> Protocol:
    """Trunk/branch/local block protocol (variants B0, B1, B2).

    B0: beta = 2*I; B1: blockdiag(0.5 I_T, 4 I_B, 4 I_L); B2: like B1 but the branch
    block is 6*I for t < t_star and 1*I afterwards.  The guide is the fast-then-hold
    trunk trajectory nu_t = min(2t, 1) * mu_trunk sampled at interval midpoints.
    """
    d = d_T + d_B + d_L
    if d <= 0 or min(d_T, d_B, d_L) < 0:
        raise ValueError(f"invalid block split ({d_T}, {d_B}, {d_L})")
    if variant not in ("B0", "B1", "B2"):
        raise ValueError(f"unknown variant {variant!r}")
    grid = TimeGrid.uniform(K)
    if variant == "B2" and not np.any(np.isclose(grid.breakpoints, t_star, atol=1e-12)):
        raise ValueError(f"t_star = {t_star} does not fall on a breakpoint of the K={K} grid")
    if mu_trunk is None:
        mu_trunk = np.zeros(d)
        if d_T > 0:
            mu_trunk[:d_T] = 3.0 / math.sqrt(d_T)
    mu_trunk = np.asarray(mu_trunk, dtype=float)
    s = grid.midpoints
    intervals = []
    for k in range(K):
        if variant == "B0":
            beta = 2.0 * np.eye(d)
        else:
            branch = 4.0
            if variant == "B2":
                branch = 6.0 if s[k] < t_star else 1.0
            diag = np.concatenate([
                np.full(d_T, 0.5),
                np.full(d_B, branch),
                np.full(d_L, 4.0),
            ])
            beta = np.diag(diag)
        nu = min(2.0 * s[k], 1.0) * mu_trunk
        intervals.append(ProtocolInterval(beta=beta, nu=nu, sigma=np.zeros((d, d)), kappa=kappa))
    return Protocol(grid=grid, intervals=tuple(intervals), dim=d)


def build_sigma_schedule(
    sign: int,
    alpha: float = 0.05,
    mu: float = 1.0,
    delta: float = 0.5,
    beta_off: float = 0.4,
    K: int = 10,
) -> list[np.ndarray]:
    """Smooth fixed symmetric 2x2 drift schedule sampled at interval midpoints.

    sigma_k = sign * alpha * sin^4(pi s_k) * [[mu + delta cos(2 pi s_k), beta_off sin(2 pi s_k)],
                                              [beta_off sin(2 pi s_k), mu - delta cos(2 pi s_k)]]
    and vanishes at both endpoints.
    """
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    s = (np.arange(K) + 0.5) / K
    out = []
    for sk in s:
        env = math.sin(math.pi * sk) ** 4
        off = beta_off * math.sin(2 * math.pi * sk)
        dia = delta * math.cos(2 * math.pi * sk)
        out.append(sign * alpha * env * np.array([[mu + dia, off], [off, mu - dia]]))
    return out


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def protocol_to_json(protocol: Protocol) -> str:
    doc = {
        "grid": [float(t) for t in protocol.grid.breakpoints],
        "dim": protocol.dim,
        "intervals": [
            {
                "beta": [float(v) for v in iv.beta.ravel()],
                "nu": [float(v) for v in iv.nu],
                "sigma": [float(v) for v in iv.sigma.ravel()],
                "kappa": iv.kappa,
            }
            for iv in protocol.intervals
        ],
    }
    return json.dumps(doc, indent=2)


def protocol_from_json(text: str) -> Protocol:
    doc = json.loads(text)
    d = int(doc["dim"])
    grid = TimeGrid(np.asarray(doc["grid"], dtype=float))
    intervals = []
    for iv in doc["intervals"]:
        intervals.append(
            ProtocolInterval(
                beta=np.asarray(iv["beta"], dtype=float).reshape(d, d),
                nu=np.asarray(iv["nu"], dtype=float),
                sigma=np.asarray(iv["sigma"], dtype=float).reshape(d, d),
                kappa=float(iv["kappa"]),
            )
        )
    return Protocol(grid=grid, intervals=tuple(intervals), dim=d)
