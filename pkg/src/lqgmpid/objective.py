"""Density-level corridor losses, regularizers, gradients, and plain-GD optimization.

The corridor-alignment loss evaluates the exact Gaussian-mixture marginal
against the corridor kernels (no Monte-Carlo inside): the oriented kernel
K_k(x) = exp(-(x-m_k)'A_k(x-m_k)/2) of interval k, centered on the corridor
midline at the interval midpoint s_k, is integrated in closed form against the
marginal at the same midpoint time, and the loss is the mean complement
1 - E[K_k] over the active window.  For a
Gaussian-mixture source the same loss averages per-particle marginals over the
frozen offset draw.  Gradients over the 2K protocol parameters (rho, c) are
central finite differences through the full coefficient cascade.
"""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .bridge import GaussianMixture, MarginalMixture, build_bridge_context, marginal, score_field
from .protocol import CorridorGeometry, Protocol, build_corridor_protocol
from .sampler import _band_grid
from .shift import build_shifted_context, propagators_from_context, shifted_marginal

__all__ = [
    "CorridorKernel",
    "LossConfig",
    "OptimizationTrace",
    "CorridorProblem",
    "build_corridor_kernel",
    "gauss_kernel_expectation",
    "mixture_kernel_expectation",
    "corridor_loss",
    "regularizers",
    "total_loss",
    "gradient",
    "optimize",
    "path_kinetic_costs",
    "warm_start_c",
]


def warm_start_c(beta_init: float = 15.0, band: tuple = (2.0, 60.0)) -> float:
    """Inverse-sigmoid placement of the initial transverse stiffness in the band."""
    p = (beta_init - band[0]) / (band[1] - band[0])
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class CorridorKernel:
    """Oriented corridor kernels, one per interval, with an active window.

    Kernel k is centered on the corridor midline at the interval midpoint s_k
    and oriented by the local tangent/normal frame there; the loss scores the
    marginal at the same midpoint time.
    """

    centers: np.ndarray     # (K, 2), on the midline
    matrices: np.ndarray    # (K, 2, 2) symmetric PSD
    active: np.ndarray      # (K,) bool
    s_values: np.ndarray    # (K,) midpoint fractions (kernel and evaluation times)
    t_cut: float

    @property
    def active_indices(self) -> np.ndarray:
        return np.nonzero(self.active)[0]


def build_corridor_kernel(geometry: CorridorGeometry, K: int = 10,
                          omega_parallel: float = 0.8, omega_perp: float = 0.2,
                          t_cut: float = 0.80) -> CorridorKernel:
    s = (np.arange(K) + 0.5) / K
    Q = geometry.frame(s)
    diag = np.diag([omega_parallel ** -2, omega_perp ** -2])
    mats = np.einsum("kij,jl,kml->kim", Q, diag, Q)
    mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return CorridorKernel(centers=geometry.midline(s), matrices=mats,
                          active=s <= t_cut, s_values=s, t_cut=t_cut)


@dataclass(frozen=True)
class LossConfig:
    lambda_corr: float = 10.0
    lambda_rho: float = 0.10
    lambda_beta: float = 0.05
    second_diff_weight: float = 0.5
    barrier_weight: float = 0.3
    barrier_scale: float = 15.0
    barrier_threshold: float = 0.55
    learning_rate: float = 3e-2
    iterations: int = 300
    c_warm_start: float = field(default_factory=warm_start_c)
    fd_step: float = 1e-4


@dataclass
class OptimizationTrace:
    corridor_losses: list = field(default_factory=list)
    total_losses: list = field(default_factory=list)
    params: list = field(default_factory=list)

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.total_losses))

    def record(self, corr: float, total: float, p: np.ndarray) -> None:
        self.corridor_losses.append(float(corr))
        self.total_losses.append(float(total))
        self.params.append(np.array(p, dtype=float))

    def to_rows(self) -> list:
        return [
            {"iteration": i, "corridor_loss": c, "total_loss": t}
            for i, (c, t) in enumerate(zip(self.corridor_losses, self.total_losses))
        ]


# ---------------------------------------------------------------------------
# Kernel expectations and corridor loss
# ---------------------------------------------------------------------------


def gauss_kernel_expectation(mean: np.ndarray, cov: np.ndarray,
                             center: np.ndarray, A: np.ndarray) -> float:
    """E_{N(mean,cov)}[exp(-(x-center)'A(x-center)/2)], exactly.

    Equals det(I + cov A)^(-1/2) exp(-(mu-m)'A(I + cov A)^-1 (mu-m)/2).
    """
    d = len(mean)
    M = np.eye(d) + cov @ A
    det = np.linalg.det(M)
    if det <= 0:
        raise AssertionError("I + cov*A must be nonsingular for PSD inputs")
    delta = np.asarray(mean) - np.asarray(center)
    quad = delta @ A @ np.linalg.solve(M, delta)
    return float(det ** -0.5 * np.exp(-0.5 * quad))


def mixture_kernel_expectation(marg: MarginalMixture, center: np.ndarray,
                               A: np.ndarray) -> float:
    """Weighted closed-form kernel expectation under a mixture marginal."""
    d = marg.dim
    covs = marg.covariances
    M = np.eye(d)[None] + covs @ A
    det = np.linalg.det(M)
    delta = marg.means - np.asarray(center)[None, :]
    Ad = delta @ A.T
    quad = np.einsum("ki,ki->k", Ad, np.linalg.solve(M, delta[..., None])[..., 0])
    vals = det ** -0.5 * np.exp(-0.5 * quad)
    return float(marg.weights @ vals)


class CorridorProblem:
    """E1/E2-style corridor shaping problem over parameters (rho_1..K, c_1..K).

    `source_offsets` of None means a delta source at the origin (E1); an array of
    frozen particle offsets switches the loss to the per-particle averaged
    mixture-source variant (E2).  An optional fixed sigma schedule extends the
    same objective to nonzero linear drift; combined with source offsets, the
    per-particle bridges run in shifted coordinates (the drift acts on x - z),
    which leaves the loss and the terminal law exact.
    """

    def __init__(self, geometry: CorridorGeometry, target: GaussianMixture,
                 config: LossConfig | None = None, K: int = 10,
                 source_offsets: np.ndarray | None = None,
                 sigma_schedule=None, epsilon: float = 1e-3):
        self.geometry = geometry
        self.target = target
        self.config = config or LossConfig()
        self.K = K
        self.kernel = build_corridor_kernel(geometry, K)
        self.source_offsets = None if source_offsets is None else np.atleast_2d(source_offsets)
        self.sigma_schedule = sigma_schedule
        self.epsilon = epsilon

    @property
    def n_params(self) -> int:
        return 2 * self.K

    def warm_start(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.K), np.full(self.K, self.config.c_warm_start)])

    def split(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        params = np.asarray(params, dtype=float)
        if params.shape != (2 * self.K,):
            raise ValueError(f"expected {2 * self.K} parameters, got shape {params.shape}")
        return params[: self.K], params[self.K:]

    def build_protocol(self, params: np.ndarray) -> Protocol:
        rho, c = self.split(params)
        return build_corridor_protocol(self.geometry, rho, c,
                                       sigma_schedule=self.sigma_schedule)

    def corridor_loss_of_protocol(self, protocol: Protocol,
                                  reuse: tuple | None = None) -> float:
        return corridor_loss(protocol, self.target, self.kernel,
                             source_offsets=self.source_offsets, epsilon=self.epsilon,
                             reuse=reuse)

    def corridor_loss(self, params: np.ndarray, reuse: tuple | None = None) -> float:
        return self.corridor_loss_of_protocol(self.build_protocol(params), reuse=reuse)

    def base_context(self, params: np.ndarray):
        """Context at `params` usable as a resweep base for single-interval probes."""
        protocol = self.build_protocol(params)
        if self.source_offsets is None:
            return build_bridge_context(protocol, self.target,
                                        np.zeros(protocol.dim), self.epsilon,
                                        with_zeta=False)
        return build_shifted_context(protocol, self.target, self.epsilon,
                                     with_zeta=False)[0]

    def corridor_loss_from_context(self, ctx) -> float:
        """Corridor loss evaluated on an existing context at this problem's params.

        Numerically identical to `corridor_loss`, but reuses (and warms) the
        context's interior-state memo caches, which single-interval FD probes
        then inherit for their unaffected intervals.
        """
        kernel = self.kernel
        times = np.clip(kernel.s_values, self.epsilon, 1.0 - self.epsilon)
        props = None if self.source_offsets is None else propagators_from_context(ctx)
        vals = []
        for k in kernel.active_indices:
            if props is None:
                marg = marginal(ctx, float(times[k]))
            else:
                marg = shifted_marginal(ctx, props, self.source_offsets, float(times[k]))
            vals.append(1.0 - mixture_kernel_expectation(
                marg, kernel.centers[k], kernel.matrices[k]))
        return float(np.mean(vals))

    def _assemble_terms(self, params: np.ndarray, corr: float) -> dict:
        rho, c = self.split(params)
        l_rho, l_beta = regularizers(rho, c, self.config)
        cfg = self.config
        total = cfg.lambda_corr * corr + cfg.lambda_rho * l_rho + cfg.lambda_beta * l_beta
        n_active = len(self.kernel.active_indices)
        descent = (cfg.lambda_corr * n_active * corr
                   + cfg.lambda_rho * l_rho + cfg.lambda_beta * l_beta)
        return {"corridor": corr, "l_rho": l_rho, "l_beta": l_beta,
                "total": total, "descent": descent}

    def loss_terms(self, params: np.ndarray, reuse: tuple | None = None) -> dict:
        return self._assemble_terms(params, self.corridor_loss(params, reuse=reuse))

    def loss_terms_from_context(self, params: np.ndarray, ctx) -> dict:
        return self._assemble_terms(params, self.corridor_loss_from_context(ctx))

    def total_loss(self, params: np.ndarray, reuse: tuple | None = None) -> float:
        return self.loss_terms(params, reuse=reuse)["total"]

    def descent_loss(self, params: np.ndarray, reuse: tuple | None = None) -> float:
        """Training objective: summed (not averaged) per-interval corridor terms.

        The reported corridor loss is the mean complement over the active
        window; the optimizer descends on the sum so that each active
        interval's kernel contributes a unit-weight term and the gradient
        scale does not shrink with the window size.  Both objectives share
        the same minimizers' ordering up to the regularizer weighting.
        """
        return self.loss_terms(params, reuse=reuse)["descent"]


def corridor_loss(protocol: Protocol, target: GaussianMixture, kernel: CorridorKernel,
                  source_offsets: np.ndarray | None = None,
                  epsilon: float = 1e-3, reuse: tuple | None = None) -> float:
    """Mean over the active window of 1 - E[K_k] under the exact marginal.

    Interval k is scored at its midpoint time s_k (clipped to the working
    band), against the kernel centered at the same midpoint.  `reuse` is a
    (context, changed_interval) pair enabling the incremental-resweep shortcut
    when `protocol` differs from the context's protocol in one interval.
    """
    vals = []
    times = np.clip(kernel.s_values, epsilon, 1.0 - epsilon)
    if source_offsets is None:
        ctx = build_bridge_context(protocol, target, np.zeros(protocol.dim), epsilon,
                                   reuse=reuse, with_zeta=False)
        for k in kernel.active_indices:
            marg = marginal(ctx, float(times[k]))
            vals.append(1.0 - mixture_kernel_expectation(marg, kernel.centers[k], kernel.matrices[k]))
    else:
        ctx, props = build_shifted_context(protocol, target, epsilon, reuse=reuse,
                                           with_zeta=False)
        for k in kernel.active_indices:
            marg = shifted_marginal(ctx, props, source_offsets, float(times[k]))
            vals.append(1.0 - mixture_kernel_expectation(marg, kernel.centers[k], kernel.matrices[k]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Regularizers, total loss, gradient, optimizer
# ---------------------------------------------------------------------------


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def regularizers(rho: np.ndarray, c: np.ndarray, config: LossConfig) -> tuple[float, float]:
    """Smoothness/barrier penalty on rho and smoothness/anchor penalty on c."""
    rho = np.asarray(rho, dtype=float)
    c = np.asarray(c, dtype=float)
    K = len(rho)
    d1 = np.diff(rho)
    d2 = np.diff(rho, n=2)
    barrier = _softplus(config.barrier_scale * (np.abs(rho) - config.barrier_threshold))
    l_rho = (
        float(d1 @ d1) / (K - 1)
        + config.second_diff_weight * float(d2 @ d2) / (K - 2)
        + config.barrier_weight * float(np.mean(barrier)) / config.barrier_scale
    )
    dc = np.diff(c)
    l_beta = float(dc @ dc) / (K - 1) + float(np.sum((c - config.c_warm_start) ** 2)) / K
    return l_rho, l_beta


def total_loss(problem: CorridorProblem, params: np.ndarray) -> float:
    return problem.total_loss(params)


_PROBE_STATE: dict = {}


def _probe_worker_init(problem: CorridorProblem) -> None:
    _PROBE_STATE["problem"] = problem
    _PROBE_STATE["base_key"] = None


def _probe_worker_run(args):
    """Central-difference quotients for a batch of parameter indices.

    Runs in a forked worker; the base-point context is rebuilt once per
    parameter point and shared by the worker's probes through the
    incremental-resweep path.
    """
    params, indices, h = args
    prob: CorridorProblem = _PROBE_STATE["problem"]
    key = params.tobytes()
    if _PROBE_STATE["base_key"] != key:
        _PROBE_STATE["base"] = prob.base_context(params)
        _PROBE_STATE["base_key"] = key
    base = _PROBE_STATE["base"]
    return [_probe_quotient(prob, params, i, h, base) for i in indices]


def _probe_quotient(problem: CorridorProblem, params: np.ndarray, i: int,
                    h: float, base) -> float:
    up = params.copy()
    dn = params.copy()
    up[i] += h
    dn[i] -= h
    reuse = (base, i % problem.K)
    fu = problem.descent_loss(up, reuse=reuse)
    fd = problem.descent_loss(dn, reuse=reuse)
    if not (np.isfinite(fu) and np.isfinite(fd)):
        raise FloatingPointError(f"non-finite loss at FD probe for parameter {i}")
    return (fu - fd) / (2 * h)


def gradient(problem: CorridorProblem, params: np.ndarray,
             step: float | None = None, n_threads: int = 1,
             executor=None, base=None) -> np.ndarray:
    """Central finite differences of the descent objective over all 2K parameters.

    Each probe perturbs one (rho_i or c_i), i.e. one protocol interval, so the
    probe sweeps reuse the unaffected side of the base parameter point's sweeps.
    Probes at distinct parameter points are independent; with `executor` (a
    process pool created by `probe_pool`) they run in parallel worker
    processes, which sidesteps the interpreter lock that makes thread-level
    parallelism ineffective for these small-matrix workloads.
    """
    params = np.asarray(params, dtype=float)
    h = problem.config.fd_step if step is None else step
    n = len(params)

    if executor is not None:
        workers = executor._max_workers
        batches = [list(range(n))[j::workers] for j in range(workers)]
        batches = [b for b in batches if b]
        results = executor.map(_probe_worker_run, [(params, b, h) for b in batches])
        out = np.empty(n)
        for batch, vals in zip(batches, results):
            out[batch] = vals
        return out

    if base is None:
        base = problem.base_context(params)
    probe = partial(_probe_quotient, problem, params, h=h, base=base)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            return np.array(list(pool.map(lambda i: probe(i), range(n))))
    return np.array([probe(i) for i in range(n)])


def probe_pool(problem: CorridorProblem, n_jobs: int):
    """Process pool for parallel FD probes, or None for in-process evaluation."""
    if n_jobs <= 1:
        return None
    ctx = multiprocessing.get_context("fork")
    return ProcessPoolExecutor(max_workers=n_jobs, mp_context=ctx,
                               initializer=_probe_worker_init, initargs=(problem,))


def optimize(problem: CorridorProblem, params0: np.ndarray | None = None,
             n_threads: int = 1, callback=None) -> tuple[np.ndarray, OptimizationTrace]:
    """Plain gradient descent; returns the best-by-total-loss parameter snapshot."""
    cfg = problem.config
    p = problem.warm_start() if params0 is None else np.array(params0, dtype=float)
    trace = OptimizationTrace()
    pool = probe_pool(problem, n_threads)
    try:
        for it in range(cfg.iterations + 1):
            # Evaluating the loss through the base context warms its interior
            # memo, which the gradient's single-interval probes inherit.
            base = problem.base_context(p)
            terms = problem.loss_terms_from_context(p, base)
            trace.record(terms["corridor"], terms["total"], p)
            if callback is not None:
                callback(it, terms, p)
            if it == cfg.iterations:
                break
            g = gradient(problem, p, executor=pool, base=base)
            p = p - cfg.learning_rate * g
    finally:
        if pool is not None:
            pool.shutdown()
    best = trace.params[trace.best_index]
    return best, trace


# ---------------------------------------------------------------------------
# Path/kinetic costs
# ---------------------------------------------------------------------------


def path_kinetic_costs(ctx, times: np.ndarray | None = None, n_samples: int = 2048,
                       seed: int = 0, n_time_nodes: int = 61) -> tuple[float, float]:
    """(J_path, J_kin): guide adherence by exact moments, kinetic term by MC.

    J_path = Int E||x - nu_t||^2 dt uses the exact mixture second moments;
    J_kin = Int E||u*||^2/(2 kappa_t) dt is estimated by sampling the exact
    marginal (the softmax-mixture score has no finite Gaussian-moment form).
    """
    if times is None:
        times = _band_grid(ctx, n_time_nodes - 1)
    rng = np.random.default_rng(seed)
    jpath = np.empty(len(times))
    jkin = np.empty(len(times))
    for i, t in enumerate(times):
        t = float(t)
        iv = ctx.protocol.interval_at(t)
        marg = marginal(ctx, t)
        mean = marg.mean()
        cov = marg.covariance()
        diff = mean - iv.nu
        jpath[i] = np.trace(cov) + diff @ diff
        X = marg.as_mixture().sample(rng, n_samples)
        u = score_field(ctx.component_quantities(t), X)
        jkin[i] = 0.5 / ctx.kappa_at(t) * np.mean(np.sum(u * u, axis=1))
    return float(np.trapezoid(jpath, times)), float(np.trapezoid(jkin, times))
