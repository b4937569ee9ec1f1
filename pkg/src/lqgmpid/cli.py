"""Configuration-driven command-line harness.

Three subcommands:

* ``sweep`` — build or load a piecewise-constant protocol, run both
  coefficient sweeps, and write a debug coefficient dump plus the precompute
  wall time.
* ``experiment`` — run one of the e1/e2/h1/e3 experiment suites into a run
  directory (config.json, manifest.json, summary.json, traces/, snapshots/).
* ``validate`` — run the independent-oracle check suites (ODE integration,
  finite differences, full-resweep equivalence) and report per-check
  tolerances and outcomes; supports fault injection on the shift propagators.

Exit codes: 0 on success, 1 on validation failure, 2 on configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bridge import GaussianMixture, build_bridge_context, log_psi, marginal, score
from .experiments import (
    ExperimentConfig,
    _h1_split,
    _package_version,
    default_config,
    run_experiment,
)
from .objective import CorridorProblem, gradient
from .protocol import (
    CorridorGeometry,
    Protocol,
    ProtocolInterval,
    build_baseline_protocol,
    build_corridor_protocol,
    build_hierarchical_protocol,
    protocol_from_json,
    validate,
)
from .riccati import (
    CoefficientState,
    backward_interval_update,
    forward_interval_update,
    hamiltonian_blocks,
    run_sweep,
)
from .shift import build_shifted_context, shifted_score

__all__ = ["main", "cmd_sweep", "cmd_experiment", "cmd_validate"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Malformed or inconsistent command configuration."""


def _load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path!r} must contain a JSON object")
    return doc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


_SWEEP_KEYS = {"protocol_file", "protocol", "builder", "epsilon"}


def _build_protocol_from_config(doc: dict, config_path: str) -> Protocol:
    extra = set(doc) - _SWEEP_KEYS
    if extra:
        raise ConfigError(f"unknown sweep config fields: {sorted(extra)}")
    sources = [k for k in ("protocol_file", "protocol", "builder") if k in doc]
    if len(sources) != 1:
        raise ConfigError(
            "sweep config needs exactly one of 'protocol_file', 'protocol', "
            f"or 'builder'; found {sources or 'none'}"
        )
    key = sources[0]
    try:
        if key == "protocol_file":
            raw = Path(doc["protocol_file"])
            if not raw.is_absolute():
                raw = Path(config_path).parent / raw
            return protocol_from_json(raw.read_text())
        if key == "protocol":
            return protocol_from_json(json.dumps(doc["protocol"]))
        return _build_from_builder(doc["builder"])
    except ConfigError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot build protocol from {key!r}: {exc}") from exc


def _build_from_builder(spec: dict) -> Protocol:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("'builder' must be an object with a 'kind' field")
    kind = spec["kind"]
    params = {k: v for k, v in spec.items() if k != "kind"}
    geometry = CorridorGeometry()
    if kind == "corridor":
        rho = params.pop("rho", [0.0] * 10)
        c = params.pop("c", [0.0] * 10)
        return build_corridor_protocol(geometry, rho, c, **params)
    if kind == "baseline":
        return build_baseline_protocol(geometry, **params)
    if kind == "hierarchical":
        if "d" in params:
            d_T, d_B, d_L = _h1_split(int(params.pop("d")))
        else:
            d_T = int(params.pop("d_T"))
            d_B = int(params.pop("d_B"))
            d_L = int(params.pop("d_L"))
        variant = params.pop("variant", "B0")
        return build_hierarchical_protocol(d_T, d_B, d_L, variant, **params)
    raise ConfigError(
        f"unknown builder kind {kind!r}; expected corridor|baseline|hierarchical"
    )


def cmd_sweep(args) -> int:
    doc = _load_config(args.config)
    protocol = _build_protocol_from_config(doc, args.config)
    epsilon = args.eps if args.eps is not None else float(doc.get("epsilon", 1e-3))

    violations = validate(protocol)
    if violations:
        for v in violations:
            print(f"protocol violation: {v}", file=sys.stderr)
        return EXIT_VALIDATION

    t0 = time.perf_counter()
    backward = run_sweep(protocol, "backward", epsilon)
    forward = run_sweep(protocol, "forward", epsilon)
    precompute_ms = 1000.0 * (time.perf_counter() - t0)

    out = Path(args.out or "sweep_out")
    dump = {
        "dim": protocol.dim,
        "epsilon": epsilon,
        "backward": backward.to_debug_dict(),
        "forward": forward.to_debug_dict(),
    }
    _write_json(out / "sweep.json", dump)
    config_doc = json.dumps(doc, sort_keys=True)
    _write_json(out / "manifest.json", {
        "config_hash": hashlib.sha256(config_doc.encode()).hexdigest(),
        "precompute_ms": precompute_ms,
        "artifacts": ["manifest.json", "sweep.json"],
        "version": _package_version(),
    })
    print(f"dim {protocol.dim}  intervals {len(protocol)}  "
          f"precompute_ms {precompute_ms:.3f}")
    print(f"wrote {out / 'sweep.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def cmd_experiment(args) -> int:
    if args.config is not None:
        doc = _load_config(args.config)
        try:
            cfg = ExperimentConfig.from_json_dict(doc)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc
        if args.id is not None and args.id != cfg.experiment:
            raise ConfigError(
                f"experiment id {args.id!r} conflicts with config "
                f"experiment {cfg.experiment!r}"
            )
    elif args.id is not None:
        try:
            cfg = default_config(args.id)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError("experiment needs --config FILE or an experiment id")

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.eps is not None:
        overrides["epsilon"] = args.eps
    if overrides:
        cfg = ExperimentConfig.from_json_dict({**cfg.to_json_dict(), **overrides})

    out = Path(args.out or Path("runs") / cfg.experiment)
    summary = run_experiment(cfg, out)
    print(f"experiment {cfg.experiment} complete -> {out}")
    if "optimization" in summary:
        opt = summary["optimization"]
        print(f"  baseline corridor loss  {summary['baseline']['corridor_loss']:.4f}")
        print(f"  optimized corridor loss {opt['best_corridor_loss']:.4f} "
              f"(reduction {100 * opt['reduction_vs_baseline']:.1f}%)")
    if cfg.experiment == "h1":
        print(f"  {summary['n_scenarios']} scenarios -> h1_table.csv")
    if cfg.experiment == "e3":
        print(f"  effort ordering: {' > '.join(summary['effort_ordering'])}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return np.isfinite(self.value) and self.value < self.tolerance


def _rand_spd(rng, d: int, scale: float = 1.0) -> np.ndarray:
    M = rng.normal(size=(d, d))
    return scale * (M @ M.T / d + 0.1 * np.eye(d))


def _coefficient_ode_rhs(branch: str, iv: ProtocolInterval, d: int, m: int):
    """Right-hand side of the interval coefficient ODE system, for solve_ivp."""
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


def _pack_state(st: CoefficientState) -> np.ndarray:
    return np.concatenate([st.A.ravel(), st.B.ravel(), st.C.ravel(),
                           st.theta_x.ravel(), st.theta_y.ravel(), [st.zeta]])


def suite_riccati() -> list:
    """Interval updates vs direct ODE integration, plus algebraic identities."""
    from scipy.integrate import solve_ivp

    rng = np.random.default_rng(0)
    d, m = 3, 2
    checks = []
    intervals = {
        "general": ProtocolInterval(beta=_rand_spd(rng, d, 2.0), nu=rng.normal(size=d),
                                    sigma=rng.normal(size=(d, d)) * 0.3, kappa=0.7),
        "scalar_drift": ProtocolInterval(beta=_rand_spd(rng, d, 2.0), nu=rng.normal(size=d),
                                         sigma=0.25 * np.eye(d), kappa=0.7),
        "zero_drift": ProtocolInterval(beta=_rand_spd(rng, d, 2.0), nu=rng.normal(size=d),
                                       sigma=np.zeros((d, d)), kappa=1.0),
    }
    C0 = rng.normal(size=(d, d))
    st_bwd = CoefficientState(branch="backward", t=1.0, A=_rand_spd(rng, d),
                              B=rng.normal(size=(d, d)), C=0.5 * (C0 + C0.T),
                              theta_x=rng.normal(size=(d, m)),
                              theta_y=rng.normal(size=(d, m)), zeta=0.3)
    st_fwd = CoefficientState(branch="forward", t=0.0, A=st_bwd.A, B=st_bwd.B,
                              C=st_bwd.C, theta_x=st_bwd.theta_x,
                              theta_y=st_bwd.theta_y, zeta=0.3)
    tau = 0.37
    for name, iv in intervals.items():
        for branch, st0 in (("backward", st_bwd), ("forward", st_fwd)):
            update = (backward_interval_update if branch == "backward"
                      else forward_interval_update)
            got = _pack_state(update(st0, iv, tau))
            sol = solve_ivp(_coefficient_ode_rhs(branch, iv, d, m), (0.0, tau),
                            _pack_state(st0), rtol=1e-12, atol=1e-13,
                            method="DOP853")
            ref = sol.y[:, -1]
            err = float(np.max(np.abs(got - ref)) / (1 + np.max(np.abs(ref))))
            checks.append(Check(f"riccati/ode_{name}_{branch}", err, 1e-8))

    # Transition blocks compose over subintervals.
    for name in ("general", "scalar_drift"):
        iv = intervals[name]
        for branch in ("backward", "forward"):
            b1 = hamiltonian_blocks(iv, branch, 0.13).full_matrix()
            b2 = hamiltonian_blocks(iv, branch, 0.24).full_matrix()
            b3 = hamiltonian_blocks(iv, branch, 0.37).full_matrix()
            err = float(np.max(np.abs(b2 @ b1 - b3)))
            checks.append(Check(f"riccati/semigroup_{name}_{branch}", err, 1e-11))

    # Eigenbasis fast path agrees with the generic matrix-exponential path.
    for branch in ("backward", "forward"):
        bm = hamiltonian_blocks(intervals["scalar_drift"], branch, tau).full_matrix()
        bg = hamiltonian_blocks(intervals["scalar_drift"], branch, tau,
                                force_general=True).full_matrix()
        err = float(np.max(np.abs(bm - bg)))
        checks.append(Check(f"riccati/mode_vs_general_{branch}", err, 1e-11))

    # Free motion from a delta boundary layer: A(tau) = I / (kappa (eps + tau)).
    eps, kap, tau_h = 1e-3, 1.3, 0.4
    iv_heat = ProtocolInterval(beta=np.zeros((d, d)), nu=np.zeros(d),
                               sigma=np.zeros((d, d)), kappa=kap)
    big = np.eye(d) / (kap * eps)
    st_heat = CoefficientState(branch="backward", t=1.0, A=big, B=big.copy(),
                               C=big.copy(), theta_x=np.zeros((d, m)),
                               theta_y=np.zeros((d, m)), zeta=0.0)
    got = backward_interval_update(st_heat, iv_heat, tau_h).A
    err = float(np.max(np.abs(got - np.eye(d) / (kap * (eps + tau_h)))))
    checks.append(Check("riccati/heat_kernel_A", err, 1e-10))
    return checks


def _random_test_problem(rng, K: int = 4, sigma_scale: float = 0.2):
    d = 2
    intervals = tuple(
        ProtocolInterval(beta=_rand_spd(rng, d, 2.0), nu=rng.normal(size=d),
                         sigma=sigma_scale * rng.normal(size=(d, d)), kappa=0.8)
        for _ in range(K)
    )
    from .protocol import TimeGrid
    protocol = Protocol(grid=TimeGrid.uniform(K), intervals=intervals, dim=d)
    target = GaussianMixture(
        weights=np.array([0.4, 0.6]),
        means=np.array([[1.0, 0.5], [-0.5, 1.5]]),
        covariances=np.stack([0.05 * np.eye(d),
                              np.array([[0.08, 0.02], [0.02, 0.04]])]),
    )
    return protocol, target


def suite_bridge() -> list:
    """Score/potential consistency and endpoint exactness of the marginals."""
    rng = np.random.default_rng(7)
    eps = 1e-3
    protocol, target = _random_test_problem(rng)
    x0 = np.array([0.3, -0.2])
    ctx = build_bridge_context(protocol, target, x0, eps)
    checks = []

    # score = kappa * grad log psi (finite-difference oracle).
    t, h = 0.47, 1e-5
    worst = 0.0
    for x in rng.normal(size=(5, 2)):
        u = score(ctx, t, x)
        g = np.array([
            (log_psi(ctx, t, x + h * e) - log_psi(ctx, t, x - h * e)) / (2 * h)
            for e in np.eye(2)
        ])
        worst = max(worst, float(np.max(np.abs(u - ctx.kappa_at(t) * g))
                                 / (1 + np.max(np.abs(u)))))
    checks.append(Check("bridge/score_vs_fd_grad_log_psi", worst, 1e-6))

    # Terminal marginal reproduces the target mixture (matched components).
    mT = marginal(ctx, ctx.band[1])
    mean_err = cov_err = 0.0
    for k in range(target.n_components):
        j = int(np.argmin(np.linalg.norm(mT.means - target.means[k], axis=1)))
        mean_err = max(mean_err, float(np.linalg.norm(mT.means[j] - target.means[k])))
        cov_err = max(cov_err, float(np.max(np.abs(
            mT.covariances[j] - target.covariances[k]))))
    checks.append(Check("bridge/terminal_mean_error", mean_err, 5e-3))
    checks.append(Check("bridge/terminal_cov_error", cov_err, 5e-3))
    checks.append(Check("bridge/weights_sum_to_one",
                        float(abs(mT.weights.sum() - 1.0)), 1e-12))

    # Initial marginal concentrates at the conditioning point.
    m0 = marginal(ctx, ctx.band[0])
    checks.append(Check("bridge/initial_mean_at_x0",
                        float(np.linalg.norm(m0.mean() - x0)), 5e-3))
    return checks


class _CorruptedPropagators:
    """Fault-injection wrapper scaling one column of the x-propagator."""

    def __init__(self, inner, column: int, factor: float = 1.01):
        self._inner = inner
        self._column = column
        self._factor = factor

    def Lx_minus(self, t: float) -> np.ndarray:
        L = self._inner.Lx_minus(t).copy()
        L[:, self._column] *= self._factor
        return L

    def __getattr__(self, name):
        return getattr(self._inner, name)


def suite_shift(corrupt_column: int | None = None) -> list:
    """Shifted-frame scores vs a full resweep of the translated problem.

    One check per offset column: offset z = e_j isolates column j of the
    shift propagators, so a corrupted column fails exactly its own check.
    """
    rng = np.random.default_rng(7)
    eps = 1e-3
    protocol, target = _random_test_problem(rng, sigma_scale=0.0)
    ctx, props = build_shifted_context(protocol, target, eps)
    if corrupt_column is not None:
        if not 0 <= corrupt_column < protocol.dim:
            raise ConfigError(
                f"corrupt column {corrupt_column} out of range for dim {protocol.dim}"
            )
        props = _CorruptedPropagators(props, corrupt_column)

    checks = []
    for j in range(protocol.dim):
        z = np.eye(protocol.dim)[j]
        translated = Protocol(grid=protocol.grid, intervals=tuple(
            ProtocolInterval(beta=iv.beta, nu=iv.nu - z, sigma=iv.sigma,
                             kappa=iv.kappa)
            for iv in protocol.intervals), dim=protocol.dim)
        shifted_target = GaussianMixture(target.weights, target.means - z,
                                         target.covariances)
        ctx_full = build_bridge_context(translated, shifted_target,
                                        np.zeros(protocol.dim), eps)
        worst = 0.0
        for t in (0.13, 0.47, 0.81):
            for x in rng.normal(size=(3, protocol.dim)):
                u1 = shifted_score(ctx, props, z, t, x)
                u2 = score(ctx_full, t, x)
                worst = max(worst, float(np.max(np.abs(u1 - u2))
                                         / (1 + np.max(np.abs(u2)))))
        checks.append(Check(f"shift/propagator_column_{j}", worst, 1e-9))
    return checks


def suite_gradient() -> list:
    """Reused-sweep FD gradient vs independent full-rebuild central differences."""
    geometry = CorridorGeometry()
    target = GaussianMixture(
        weights=np.array([0.5, 0.5]),
        means=np.array([[3.0, 0.5], [3.0, -0.5]]),
        covariances=np.stack([np.diag([0.06, 0.05])] * 2),
    )
    problem = CorridorProblem(geometry, target)
    rng = np.random.default_rng(11)
    params = problem.warm_start() + 0.05 * rng.normal(size=problem.n_params)
    g_fast = gradient(problem, params)
    h = problem.config.fd_step
    g_ref = np.empty_like(g_fast)
    for i in range(len(params)):
        up, dn = params.copy(), params.copy()
        up[i] += h
        dn[i] -= h
        g_ref[i] = (problem.descent_loss(up) - problem.descent_loss(dn)) / (2 * h)
    err = float(np.max(np.abs(g_fast - g_ref) / (1e-12 + np.abs(g_ref))))
    return [Check("gradient/reuse_vs_full_rebuild_fd", err, 1e-4)]


_SUITES = {
    "riccati": suite_riccati,
    "bridge": suite_bridge,
    "shift": suite_shift,
    "gradient": suite_gradient,
}


def cmd_validate(args) -> int:
    names = list(_SUITES) if args.suite == "all" else [args.suite]
    if args.corrupt_column is not None and "shift" not in names:
        raise ConfigError("--corrupt-column applies to the shift suite only")
    checks = []
    for name in names:
        if name == "shift":
            checks.extend(suite_shift(corrupt_column=args.corrupt_column))
        else:
            checks.extend(_SUITES[name]())
    width = max(len(c.name) for c in checks)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status}  {c.name:<{width}}  value {c.value:.3e}  "
              f"tolerance {c.tolerance:.0e}")
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if failed:
        for c in failed:
            print(f"validation failure: {c.name}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqgmpid",
        description="Closed-form Gaussian-mixture bridge engine: sweeps, "
                    "experiments, and validation oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--threads", type=int, help="worker count override")
        p.add_argument("--eps", type=float,
                       help="endpoint regularization epsilon override")

    p_sweep = sub.add_parser("sweep", help="run both coefficient sweeps and "
                                           "dump the per-breakpoint states")
    p_sweep.add_argument("--config", required=True, help="sweep config JSON")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_exp = sub.add_parser("experiment", help="run an experiment suite")
    p_exp.add_argument("id", nargs="?", choices=["e1", "e2", "h1", "e3"],
                       help="experiment id (defaults taken from --config)")
    p_exp.add_argument("--config", help="experiment config JSON")
    common(p_exp)
    p_exp.set_defaults(func=cmd_experiment)

    p_val = sub.add_parser("validate", help="run the oracle check suites")
    p_val.add_argument("suite", nargs="?", default="all",
                       choices=["riccati", "bridge", "shift", "gradient", "all"])
    p_val.add_argument("--corrupt-column", type=int, default=None,
                       help="fault injection: corrupt this column of the "
                            "shift x-propagator")
    common(p_val)
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 — surface stage failures cleanly
        print(f"{args.command} failed: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
