"""Experiment drivers writing reproducible run directories.

Four configuration-driven experiments:

* ``e1`` — 2-D corridor shaping from a point source: baseline vs optimized
  protocol, with snapshot particle clouds, loss history, and a summary table.
* ``e2`` — the same corridor with a Gaussian-mixture source handled by frozen
  per-particle coordinate shifts, plus early-time "entrance merge" snapshots.
* ``h1`` — trunk/branch/local hierarchical targets across dimensions, mode
  counts, and stiffness variants (B0/B1/B2), with subspace-variance traces.
* ``e3`` — the mixture-source corridor under three fixed drift-matrix
  schedules (+, 0, -), re-optimized per schedule, with control-effort and
  mode-balance diagnostics.

Every run writes one directory: config.json, manifest.json, summary.json,
traces/*.csv, snapshots/*.csv, protocol JSON files.  Reruns with the same
config and seed are byte-identical except manifest timings.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bridge import GaussianMixture, build_bridge_context, marginal
from .objective import (
    CorridorProblem,
    LossConfig,
    build_corridor_kernel,
    corridor_loss,
)
from .protocol import (
    CorridorGeometry,
    Protocol,
    build_baseline_protocol,
    build_hierarchical_protocol,
    build_sigma_schedule,
    protocol_to_json,
)
from .sampler import (
    DiagnosticsReport,
    branching_time,
    control_diagnostics,
    guide_cost,
    simulate,
    simulate_shifted,
    subspace_variance_trace,
    tv_mode_error,
)
from .shift import build_shifted_context, freeze_source_offsets, shifted_marginal

__all__ = [
    "ExperimentConfig",
    "SNAPSHOT_TIMES",
    "EARLY_SNAPSHOT_TIMES",
    "default_config",
    "corridor_target",
    "entrance_source",
    "build_hierarchical_target",
    "h1_scenarios",
    "run_experiment",
    "run_e1",
    "run_e2",
    "run_h1",
    "run_e3",
]

SNAPSHOT_TIMES = (0.0, 0.12, 0.25, 0.38, 0.50, 0.62, 0.75, 0.88, 1.0)
EARLY_SNAPSHOT_TIMES = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
CSV_FLOAT = "%.17g"

_DEFAULT_OPTIONS = {
    "e1": {
        "B": 4000, "N": 600, "iterations": 300, "snapshot_particles": 1000,
        "target_means": [[3.0, 0.5], [3.0, -0.5]],
        "target_variances": [0.06, 0.05],
    },
    "e2": {
        "n_source": 60, "N": 600, "iterations": 300, "snapshot_particles": 1000,
        "target_means": [[3.0, 0.5], [3.0, -0.5]],
        "target_variances": [0.06, 0.05],
        "source_means": [[-0.3, 0.5], [-0.3, -0.5]],
        "source_std": 0.12,
    },
    "h1": {
        "B": 1024, "N": 600, "K": 12, "t_star": 0.5,
        "dims": [4, 8, 16, 32], "modes": [2, 4, 8, 16],
        "variants": ["B0", "B1", "B2"],
        "dim_sweep_modes": 8, "mode_sweep_dim": 16,
        "subspace_check": {"d": 8, "M": 8, "variant": "B1", "B": 4096},
        "trace_nodes": 61,
    },
    "e3": {
        "B": 400, "N": 600, "iterations": 300, "n_source": 60,
        "effort_nodes": 601, "effort_samples": 2048,
        "target_means": [[3.0, 0.5], [3.0, -0.5]],
        "target_variances": [0.06, 0.05],
        "source_means": [[-0.3, 0.5], [-0.3, -0.5]],
        "source_std": 0.12,
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """JSON-round-trippable description of one experiment run."""

    experiment: str
    seed: int = 0
    epsilon: float = 1e-3
    threads: int = 1
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in _DEFAULT_OPTIONS:
            raise ValueError(
                f"unknown experiment {self.experiment!r}; "
                f"expected one of {sorted(_DEFAULT_OPTIONS)}"
            )
        merged = dict(_DEFAULT_OPTIONS[self.experiment])
        merged.update(self.options)
        object.__setattr__(self, "options", merged)

    def to_json_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seed": int(self.seed),
            "epsilon": float(self.epsilon),
            "threads": int(self.threads),
            "options": self.options,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {"experiment", "seed", "epsilon", "threads", "options"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        if "experiment" not in doc:
            raise ValueError("config is missing the 'experiment' field")
        return cls(
            experiment=doc["experiment"],
            seed=int(doc.get("seed", 0)),
            epsilon=float(doc.get("epsilon", 1e-3)),
            threads=int(doc.get("threads", 1)),
            options=dict(doc.get("options", {})),
        )


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig(experiment=experiment, **overrides)


# ---------------------------------------------------------------------------
# Targets and sources
# ---------------------------------------------------------------------------


def corridor_target(options: dict) -> GaussianMixture:
    """Equal-weight two-mode corridor endpoint target."""
    means = np.asarray(options["target_means"], dtype=float)
    cov = np.diag(np.asarray(options["target_variances"], dtype=float))
    return GaussianMixture(
        weights=np.full(len(means), 1.0 / len(means)),
        means=means,
        covariances=np.stack([cov] * len(means)),
    )


def entrance_source(options: dict) -> GaussianMixture:
    """Two-mode isotropic source left of the corridor entrance."""
    means = np.asarray(options["source_means"], dtype=float)
    std = float(options["source_std"])
    cov = std ** 2 * np.eye(means.shape[1])
    return GaussianMixture(
        weights=np.full(len(means), 1.0 / len(means)),
        means=means,
        covariances=np.stack([cov] * len(means)),
    )


def _mode_split(M: int, d_B: int) -> tuple[int, int]:
    """Factor M modes into (branch codebook size, local codebook size)."""
    if M < 1 or M & (M - 1):
        raise ValueError(f"mode count must be a power of two, got {M}")
    n_branch = 2 ** math.ceil(math.log2(M) / 2) if M > 1 else 1
    if d_B == 1:
        n_branch = min(n_branch, 2)
    n_branch = min(n_branch, M)
    return n_branch, M // n_branch


def _circle_codebook(n: int, dim: int, radius: float) -> np.ndarray:
    """n maximally separated offsets of given radius in the leading plane."""
    out = np.zeros((n, dim))
    if n == 1 or radius == 0.0:
        return out
    if dim == 1:
        if n > 2:
            raise ValueError("a 1-D block supports at most 2 codebook directions")
        out[:, 0] = radius * np.array([1.0, -1.0])[:n]
        return out
    ang = 2.0 * np.pi * np.arange(n) / n
    out[:, 0] = radius * np.cos(ang)
    out[:, 1] = radius * np.sin(ang)
    return out


def build_hierarchical_target(d_T: int, d_B: int, d_L: int, M: int,
                              branch_radius: float = 1.0,
                              local_radius: float = 0.5,
                              block_variances: tuple = (0.01, 0.04, 0.09),
                              local_excess: float = 1.2) -> tuple[GaussianMixture, dict]:
    """Equal-weight M-mode target with trunk/branch/local block structure.

    Modes share the trunk endpoint and differ by a branch-block codebook
    (radius `branch_radius`) crossed with a local-block codebook.  The local
    block is scaled up (codebook radius when it has >= 2 entries, per-dimension
    variance otherwise) until its designed terminal covariance trace is
    `local_excess` times the branch trace, so the terminal block ordering
    trunk < branch < local holds by construction.  Returns the mixture and a
    dict of the realized constants.
    """
    d = d_T + d_B + d_L
    v_T, v_B, v_L = block_variances
    n_branch, n_local = _mode_split(M, d_B)
    branch_book = _circle_codebook(n_branch, d_B, branch_radius)
    branch_design = v_B * d_B + (branch_radius ** 2 if n_branch > 1 else 0.0)
    target_local = local_excess * branch_design
    if n_local >= 2:
        r2 = max(local_radius ** 2, target_local - v_L * d_L)
        local_radius = math.sqrt(r2)
    else:
        v_L = max(v_L, target_local / max(d_L, 1))
    local_book = _circle_codebook(n_local, d_L, local_radius) if d_L else np.zeros((n_local, 0))

    mu_trunk = np.zeros(d)
    mu_trunk[:d_T] = 3.0 / math.sqrt(d_T)
    means = np.empty((M, d))
    idx = 0
    for b in range(n_branch):
        for l in range(n_local):
            mean = mu_trunk.copy()
            mean[d_T:d_T + d_B] += branch_book[b]
            mean[d_T + d_B:] += local_book[l]
            means[idx] = mean
            idx += 1
    cov = np.diag(np.concatenate([
        np.full(d_T, v_T), np.full(d_B, v_B), np.full(d_L, v_L)
    ]))
    mixture = GaussianMixture(
        weights=np.full(M, 1.0 / M), means=means, covariances=np.stack([cov] * M)
    )
    info = {
        "block_split": [d_T, d_B, d_L],
        "modes": M,
        "branch_codebook_size": n_branch,
        "local_codebook_size": n_local,
        "branch_radius": branch_radius,
        "local_radius": local_radius,
        "block_variances": [v_T, v_B, v_L],
        "local_excess": local_excess,
        "designed_block_traces": [
            v_T * d_T,
            branch_design,
            v_L * d_L + (local_radius ** 2 if n_local > 1 else 0.0),
        ],
    }
    return mixture, info


def _block_slices(d_T: int, d_B: int, d_L: int) -> dict:
    return {
        "trunk": slice(0, d_T),
        "branch": slice(d_T, d_T + d_B),
        "local": slice(d_T + d_B, d_T + d_B + d_L),
    }


def _h1_split(d: int) -> tuple[int, int, int]:
    """Trunk/branch/local dimensions: (2, 2, d-4), or (1, 1, 2) at d = 4."""
    if d == 4:
        return 1, 1, 2
    if d < 8:
        raise ValueError(f"hierarchical sweep supports d = 4 or d >= 8, got {d}")
    return 2, 2, d - 4


def h1_scenarios(options: dict) -> list[dict]:
    """The dimension sweep plus the mode sweep, without double-counted cells."""
    rows = []
    for d in options["dims"]:
        for variant in options["variants"]:
            rows.append({"d": int(d), "M": int(options["dim_sweep_modes"]),
                         "variant": variant})
    d_mode = int(options["mode_sweep_dim"])
    for M in options["modes"]:
        for variant in options["variants"]:
            cell = {"d": d_mode, "M": int(M), "variant": variant}
            if cell not in rows:
                rows.append(cell)
    return rows


# ---------------------------------------------------------------------------
# Run-directory plumbing
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _write_json(path: Path, obj) -> None:
    path.write_text(_canonical_json(obj) + "\n")


def _write_csv(path: Path, header: list, rows: np.ndarray,
               int_columns: int = 0) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    fmts = ["%d"] * int_columns + [CSV_FLOAT] * (rows.shape[1] - int_columns)
    np.savetxt(path, rows, fmt=fmts, delimiter=",",
               header=",".join(header), comments="")


class _RunWriter:
    """Accumulates artifacts and timings for one run directory."""

    def __init__(self, out_dir: str | Path, config: ExperimentConfig):
        self.root = Path(out_dir)
        (self.root / "traces").mkdir(parents=True, exist_ok=True)
        (self.root / "snapshots").mkdir(parents=True, exist_ok=True)
        self.config = config
        self.files: list[str] = []
        self.timings: dict[str, float] = {}
        self.json("config.json", config.to_json_dict())

    def _register(self, rel: str) -> Path:
        if rel not in self.files:
            self.files.append(rel)
        return self.root / rel

    def json(self, rel: str, obj) -> None:
        _write_json(self._register(rel), obj)

    def csv(self, rel: str, header: list, rows, int_columns: int = 0) -> None:
        _write_csv(self._register(rel), header, rows, int_columns)

    def add_timing(self, name: str, ms: float) -> None:
        self.timings[name] = self.timings.get(name, 0.0) + float(ms)

    def finish(self, summary: dict) -> dict:
        self.json("summary.json", summary)
        config_doc = _canonical_json(self.config.to_json_dict())
        manifest = {
            "config_hash": hashlib.sha256(config_doc.encode()).hexdigest(),
            "seed": int(self.config.seed),
            "timings_ms": {k: float(v) for k, v in sorted(self.timings.items())},
            "artifacts": sorted(self.files + ["manifest.json"]),
            "version": _package_version(),
        }
        _write_json(self.root / "manifest.json", manifest)
        missing = [f for f in manifest["artifacts"] if not (self.root / f).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing artifacts: {missing}")
        return summary


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("lqgmpid")
    except Exception:
        return "unknown"


def _snapshot_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 2024, int(tag)])


def _clip_time(t: float, band: tuple) -> float:
    return float(min(max(t, band[0]), band[1]))


def _terminal_errors(mixture, target: GaussianMixture) -> dict:
    """Component-matched analytic terminal errors against the target.

    `mixture` has K (or B*K, grouped by particle) components in target order.
    """
    means = mixture.means.reshape(-1, target.n_components, target.dim)
    weights = mixture.weights.reshape(-1, target.n_components)
    covs = np.asarray(mixture.covariances).reshape(
        -1, target.n_components, target.dim, target.dim
    )
    n_groups = means.shape[0]
    mean_err = np.linalg.norm(means - target.means[None], axis=2).max()
    cov_err = max(
        np.linalg.norm(covs[g, k] - target.covariances[k])
        for g in range(n_groups)
        for k in range(target.n_components)
    )
    weight_err = np.abs(weights * n_groups - target.weights[None]).max()
    return {
        "terminal_mean_error": float(mean_err),
        "terminal_cov_error": float(cov_err),
        "terminal_weight_error": float(weight_err),
        "weights_sum": float(mixture.weights.sum()),
    }


def _moment_rows(marginals) -> np.ndarray:
    rows = []
    for m in marginals:
        mean = m.mean()
        rows.append(np.concatenate([[m.t], mean, [np.trace(m.covariance())]]))
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# E1 / E2
# ---------------------------------------------------------------------------


def _params_rows(problem: CorridorProblem, params: np.ndarray) -> np.ndarray:
    rho, c = problem.split(params)
    K = problem.K
    s = (np.arange(K) + 0.5) / K
    beta_perp = 2.0 + 58.0 / (1.0 + np.exp(-c))
    return np.column_stack([np.arange(K), s, rho, c, beta_perp])


def _corridor_variant(writer: _RunWriter, name: str, protocol: Protocol,
                      target: GaussianMixture, kernel, cfg: ExperimentConfig,
                      snapshot_times, source_offsets=None) -> dict:
    """Shared E1/E2 per-protocol pipeline: loss, sampling, snapshots, moments."""
    opts = cfg.options
    eps = cfg.epsilon
    report = DiagnosticsReport()

    t0 = time.perf_counter()
    if source_offsets is None:
        ctx = build_bridge_context(protocol, target, np.zeros(protocol.dim), eps)
    else:
        ctx, props = build_shifted_context(protocol, target, eps)
    report.precompute_ms = 1000.0 * (time.perf_counter() - t0)
    writer.add_timing(f"{name}_precompute_ms", report.precompute_ms)
    band = ctx.band

    corr = corridor_loss(protocol, target, kernel,
                         source_offsets=source_offsets, epsilon=eps)

    def marginal_at(t):
        if source_offsets is None:
            return marginal(ctx, t)
        return shifted_marginal(ctx, props, source_offsets, t)

    t0 = time.perf_counter()
    if source_offsets is None:
        ens = simulate(ctx, B=int(opts["B"]), N=int(opts["N"]), seed=cfg.seed)
    else:
        ens = simulate_shifted(ctx, props, source_offsets,
                               N=int(opts["N"]), seed=cfg.seed)
    report.sample_ms = 1000.0 * (time.perf_counter() - t0)
    writer.add_timing(f"{name}_sample_ms", report.sample_ms)

    report.tv_error = tv_mode_error(ens, target)
    report.guide_cost = guide_cost(ens, protocol)

    terminal = _terminal_errors(marginal_at(band[1]), target)
    report.terminal_mean_error = terminal["terminal_mean_error"]
    report.terminal_cov_error = terminal["terminal_cov_error"]

    # Exact-moment trace and closed-form-marginal snapshot clouds.
    grid = np.linspace(band[0], band[1], 61)
    writer.csv(f"traces/{name}_moments.csv",
               ["t", "mean_0", "mean_1", "cov_trace"],
               _moment_rows([marginal_at(float(t)) for t in grid]))
    n_snap = int(opts["snapshot_particles"])
    for i, t_raw in enumerate(snapshot_times):
        t = _clip_time(t_raw, band)
        mix = marginal_at(t).as_mixture()
        pts = mix.sample(_snapshot_rng(cfg.seed, 100 * (name == "optimized") + i), n_snap)
        rows = np.column_stack([np.arange(n_snap), np.full(n_snap, t_raw), pts])
        writer.csv(f"snapshots/{name}_{i:02d}.csv",
                   ["particle", "t", "x_0", "x_1"], rows, int_columns=1)

    writer.json(f"protocol_{name}.json", json.loads(protocol_to_json(protocol)))
    doc = report.to_json_dict()
    # Wall times live in the manifest only (summary must be rerun-stable).
    doc["precompute_ms"] = None
    doc["sample_ms"] = None
    return {
        "corridor_loss": float(corr),
        **terminal,
        **doc,
    }


def _run_corridor_experiment(cfg: ExperimentConfig, out_dir,
                             source: GaussianMixture | None) -> dict:
    opts = cfg.options
    writer = _RunWriter(out_dir, cfg)
    geometry = CorridorGeometry()
    target = corridor_target(opts)
    kernel = build_corridor_kernel(geometry)
    snapshot_times = list(SNAPSHOT_TIMES)
    early = []
    offsets = None
    if source is not None:
        frozen = freeze_source_offsets(source, int(opts["n_source"]), seed=cfg.seed)
        offsets = frozen["offsets"]
        early = [t for t in EARLY_SNAPSHOT_TIMES if t not in snapshot_times]
        n = offsets.shape[0]
        writer.csv("snapshots/initial_positions.csv",
                   ["particle", "x_0", "x_1"],
                   np.column_stack([np.arange(n), offsets]), int_columns=1)
        writer.json("source.json", {**source.to_json_dict(), "draw_seed": frozen["seed"]})
    all_times = sorted(set(snapshot_times + early))

    baseline = build_baseline_protocol(geometry)
    summary_baseline = _corridor_variant(
        writer, "baseline", baseline, target, kernel, cfg, all_times, offsets
    )

    loss_config = LossConfig(iterations=int(opts["iterations"]))
    problem = CorridorProblem(geometry, target, config=loss_config,
                              source_offsets=offsets, epsilon=cfg.epsilon)
    t0 = time.perf_counter()
    best, trace = _optimize_with_threads(problem, cfg.threads)
    optimize_ms = 1000.0 * (time.perf_counter() - t0)
    writer.add_timing("optimize_ms", optimize_ms)

    rows = [[r["iteration"], r["corridor_loss"], r["total_loss"]] for r in trace.to_rows()]
    writer.csv("traces/optimization.csv",
               ["iteration", "corridor_loss", "total_loss"], rows, int_columns=1)
    writer.csv("traces/params.csv",
               ["interval", "s", "rho", "c", "beta_perp"],
               _params_rows(problem, best), int_columns=1)

    optimized = problem.build_protocol(best)
    summary_optimized = _corridor_variant(
        writer, "optimized", optimized, target, kernel, cfg, all_times, offsets
    )

    base_corr = summary_baseline["corridor_loss"]
    best_corr = summary_optimized["corridor_loss"]
    summary = {
        "experiment": cfg.experiment,
        "seed": int(cfg.seed),
        "baseline": summary_baseline,
        "optimized": summary_optimized,
        "optimization": {
            "iterations": int(opts["iterations"]),
            "initial_corridor_loss": trace.corridor_losses[0],
            "best_corridor_loss": best_corr,
            "best_iteration": trace.best_index,
            "reduction_vs_baseline": float(1.0 - best_corr / base_corr),
        },
        "snapshot_times": all_times,
    }
    return writer.finish(summary)


def _optimize_with_threads(problem: CorridorProblem, threads: int):
    from .objective import optimize

    return optimize(problem, n_threads=max(1, int(threads)))


def run_e1(cfg: ExperimentConfig, out_dir) -> dict:
    return _run_corridor_experiment(cfg, out_dir, source=None)


def run_e2(cfg: ExperimentConfig, out_dir) -> dict:
    return _run_corridor_experiment(cfg, out_dir, source=entrance_source(cfg.options))


# ---------------------------------------------------------------------------
# H1
# ---------------------------------------------------------------------------


def _run_h1_scenario(cfg: ExperimentConfig, d: int, M: int, variant: str,
                     B: int) -> tuple[dict, np.ndarray, dict]:
    opts = cfg.options
    d_T, d_B, d_L = _h1_split(d)
    protocol = build_hierarchical_protocol(
        d_T, d_B, d_L, variant, t_star=float(opts["t_star"]), K=int(opts["K"])
    )
    target, target_info = build_hierarchical_target(d_T, d_B, d_L, M)
    blocks = _block_slices(d_T, d_B, d_L)

    t0 = time.perf_counter()
    ctx = build_bridge_context(protocol, target, np.zeros(d), cfg.epsilon)
    ctx.component_quantities(ctx.band[0])  # include first evaluation in precompute
    precompute_ms = 1000.0 * (time.perf_counter() - t0)

    t0 = time.perf_counter()
    ens = simulate(ctx, B=B, N=int(opts["N"]), seed=cfg.seed)
    sample_ms = 1000.0 * (time.perf_counter() - t0)

    stride = max(1, ens.N // (int(opts["trace_nodes"]) - 1))
    sub_times = ens.times[::stride]
    analytic = [marginal(ctx, float(t)) for t in sub_times]
    emp = subspace_variance_trace(ens, blocks)
    ana = subspace_variance_trace(analytic, blocks)
    trace_rows = np.column_stack(
        [sub_times]
        + [emp[name]["trace"][::stride] for name in blocks]
        + [ana[name]["trace"] for name in blocks]
    )

    terminal_blocks = {
        name: float(emp[name]["trace"][-1]) for name in blocks
    }
    t_br = branching_time(ens, blocks["branch"])
    terminal = _terminal_errors(marginal(ctx, ctx.band[1]), target)
    row = {
        "d": d, "M": M, "variant": variant, "B": B,
        "tv_error": tv_mode_error(ens, target),
        "guide_cost": guide_cost(ens, protocol),
        "branching_time": t_br if t_br is not None else float("nan"),
        "trunk_terminal_trace": terminal_blocks["trunk"],
        "branch_terminal_trace": terminal_blocks["branch"],
        "local_terminal_trace": terminal_blocks["local"],
        "terminal_mean_error": terminal["terminal_mean_error"],
        "terminal_cov_error": terminal["terminal_cov_error"],
    }
    timings = {"precompute_ms": precompute_ms, "sample_ms": sample_ms}
    return row, trace_rows, target_info, timings


_H1_TABLE_COLUMNS = [
    "d", "M", "variant", "B", "tv_error", "guide_cost", "branching_time",
    "trunk_terminal_trace", "branch_terminal_trace", "local_terminal_trace",
    "terminal_mean_error", "terminal_cov_error",
]
_SUBSPACE_HEADER = [
    "t", "empirical_trunk", "empirical_branch", "empirical_local",
    "analytic_trunk", "analytic_branch", "analytic_local",
]


def run_h1(cfg: ExperimentConfig, out_dir) -> dict:
    opts = cfg.options
    writer = _RunWriter(out_dir, cfg)
    scenarios = h1_scenarios(opts)

    def job(cell):
        return _run_h1_scenario(cfg, cell["d"], cell["M"], cell["variant"],
                                B=int(opts["B"]))

    t0 = time.perf_counter()
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(job, scenarios))
    else:
        results = [job(cell) for cell in scenarios]
    writer.add_timing("scenarios_ms", 1000.0 * (time.perf_counter() - t0))

    rows = []
    target_infos = {}
    variant_code = {"B0": 0, "B1": 1, "B2": 2}
    for cell, (row, trace_rows, target_info, timings) in zip(scenarios, results):
        tag = f"d{cell['d']}_M{cell['M']}_{cell['variant']}"
        writer.csv(f"traces/h1_{tag}_subspace.csv", _SUBSPACE_HEADER, trace_rows)
        for name, ms in timings.items():
            writer.add_timing(f"h1_{tag}_{name}", ms)
        rows.append([
            row["d"], row["M"], variant_code[row["variant"]], row["B"],
            *[row[c] for c in _H1_TABLE_COLUMNS[4:]],
        ])
        target_infos[f"d{cell['d']}_M{cell['M']}"] = target_info
    writer.csv(
        "h1_table.csv",
        ["d", "M", "variant_code", "B"] + _H1_TABLE_COLUMNS[4:],
        rows, int_columns=4,
    )

    # Dedicated high-precision analytic-vs-empirical subspace comparison.
    check = opts["subspace_check"]
    row, trace_rows, _, timings = _run_h1_scenario(
        cfg, int(check["d"]), int(check["M"]), check["variant"], B=int(check["B"])
    )
    for name, ms in timings.items():
        writer.add_timing(f"subspace_check_{name}", ms)
    writer.csv("traces/subspace_check.csv", _SUBSPACE_HEADER, trace_rows)

    summary = {
        "experiment": "h1",
        "seed": int(cfg.seed),
        "n_scenarios": len(scenarios),
        "scenarios": [
            dict(zip(_H1_TABLE_COLUMNS, [cell["d"], cell["M"], cell["variant"],
                                         int(opts["B"])] + r[4:]))
            for cell, r in zip(scenarios, rows)
        ],
        "subspace_check": row,
        "target_geometries": target_infos,
        "variant_code": variant_code,
    }
    return writer.finish(summary)


# ---------------------------------------------------------------------------
# E3
# ---------------------------------------------------------------------------


_E3_SCHEDULES = ("sigma_plus", "sigma_zero", "sigma_minus")


def _e3_schedule(name: str, K: int = 10):
    if name == "sigma_zero":
        return None
    sign = +1 if name == "sigma_plus" else -1
    return build_sigma_schedule(sign, K=K)


def run_e3(cfg: ExperimentConfig, out_dir) -> dict:
    opts = cfg.options
    writer = _RunWriter(out_dir, cfg)
    geometry = CorridorGeometry()
    target = corridor_target(opts)
    source = entrance_source(opts)
    loss_config = LossConfig(iterations=int(opts["iterations"]))
    frozen = freeze_source_offsets(source, int(opts["n_source"]), seed=cfg.seed)
    offsets = frozen["offsets"]
    writer.json("source.json", {**source.to_json_dict(), "draw_seed": frozen["seed"]})
    sim_offsets = source.sample(np.random.default_rng([cfg.seed, 3]),
                                int(opts["B"]))
    cases = {}
    for name in _E3_SCHEDULES:
        schedule = _e3_schedule(name)
        problem = CorridorProblem(geometry, target, config=loss_config,
                                  source_offsets=offsets,
                                  sigma_schedule=schedule, epsilon=cfg.epsilon)
        t0 = time.perf_counter()
        best, trace = _optimize_with_threads(problem, cfg.threads)
        writer.add_timing(f"{name}_optimize_ms",
                          1000.0 * (time.perf_counter() - t0))
        rows = [[r["iteration"], r["corridor_loss"], r["total_loss"]]
                for r in trace.to_rows()]
        writer.csv(f"traces/{name}_optimization.csv",
                   ["iteration", "corridor_loss", "total_loss"], rows, int_columns=1)
        writer.csv(f"traces/{name}_params.csv",
                   ["interval", "s", "rho", "c", "beta_perp"],
                   _params_rows(problem, best), int_columns=1)

        protocol = problem.build_protocol(best)
        writer.json(f"protocol_{name}.json", json.loads(protocol_to_json(protocol)))
        t0 = time.perf_counter()
        ctx, props = build_shifted_context(protocol, target, cfg.epsilon)
        writer.add_timing(f"{name}_precompute_ms",
                          1000.0 * (time.perf_counter() - t0))

        terminal_mix = shifted_marginal(ctx, props, offsets, ctx.band[1])
        analytic_weights = terminal_mix.weights.reshape(
            len(offsets), target.n_components).sum(axis=0).tolist()

        em_grid = np.linspace(ctx.band[0], ctx.band[1], int(opts["effort_nodes"]))
        effort, stiffness = control_diagnostics(
            ctx, em_grid, n_samples=int(opts["effort_samples"]), seed=cfg.seed,
            props=props, z_offsets=offsets,
        )

        ens = simulate_shifted(ctx, props, sim_offsets, N=int(opts["N"]),
                               seed=cfg.seed)
        resp = target.responsibilities(ens.terminal)
        freq = np.bincount(np.argmax(resp, axis=1),
                           minlength=target.n_components) / ens.B
        cases[name] = {
            "corridor_loss": float(trace.corridor_losses[trace.best_index]),
            "analytic_mode_weights": analytic_weights,
            "analytic_weight_imbalance": float(abs(analytic_weights[0] - 0.5)),
            "empirical_mode_weights": freq.tolist(),
            "em_weight_imbalance": float(abs(freq[0] - 0.5)),
            "control_effort": float(effort),
            "stiffness_integral": float(stiffness),
            **_terminal_errors(terminal_mix, target),
        }
    summary = {
        "experiment": "e3",
        "seed": int(cfg.seed),
        "cases": cases,
        "effort_ordering": [
            name for name, _ in
            sorted(cases.items(), key=lambda kv: -kv[1]["control_effort"])
        ],
    }
    return writer.finish(summary)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


_RUNNERS = {"e1": run_e1, "e2": run_e2, "h1": run_h1, "e3": run_e3}


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run one experiment into `out_dir`; returns the summary dict."""
    runner = _RUNNERS.get(cfg.experiment)
    if runner is None:
        raise ValueError(f"no runner for experiment {cfg.experiment!r}")
    return runner(cfg, out_dir)
