"""Figure panels rendered from experiment run directories.

Every figure consumes only the run directory's CSV/JSON artifacts; nothing is
recomputed.  Rendering is deterministic: fixed style, fixed DPI, no timestamps,
so re-rendering from identical inputs produces identical image bytes.
"""

from __future__ import annotations

import glob
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["PanelSpec", "FIGURES", "panel_spec", "render"]

# Nine-column snapshot layout shared by the corridor comparison figures.
SNAPSHOT_COLUMNS = (0.0, 0.12, 0.25, 0.38, 0.50, 0.62, 0.75, 0.88, 1.0)
MERGE_COLUMNS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)

_STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "lines.linewidth": 1.2,
    "legend.frameon": False,
}
_VARIANT_COLORS = {"baseline": "tab:blue", "optimized": "tab:orange"}
_H1_COLORS = {"B0": "tab:gray", "B1": "tab:blue", "B2": "tab:orange"}


@dataclass(frozen=True)
class PanelSpec:
    """One renderable figure: id, the input globs it needs, and the output path."""

    figure: str
    run_dir: Path
    out: Path
    input_globs: tuple = field(default=())

    def missing_globs(self) -> list:
        return [g for g in self.input_globs
                if not glob.glob(str(self.run_dir / g))]


# ---------------------------------------------------------------------------
# Input loading
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> np.ndarray:
    return np.genfromtxt(path, delimiter=",", names=True)

def _read_json(path: Path):
    return json.loads(Path(path).read_text())


def _snapshot_by_time(run_dir: Path, variant: str) -> dict:
    """Map snapshot time -> (x0, x1) point cloud for one protocol variant."""
    out = {}
    for path in sorted(glob.glob(str(run_dir / "snapshots" / f"{variant}_*.csv"))):
        data = _read_csv(Path(path))
        out[round(float(data["t"][0]), 6)] = (data["x_0"], data["x_1"])
    return out


def _guide_path(protocol_doc: dict) -> np.ndarray:
    """(K, 2) guide polyline nu_k from a protocol document."""
    return np.array([iv["nu"] for iv in protocol_doc["intervals"]], dtype=float)


# ---------------------------------------------------------------------------
# Figure implementations
# ---------------------------------------------------------------------------


def _scatter_grid(spec: PanelSpec, columns) -> plt.Figure:
    """Rows = (baseline, optimized), columns = snapshot times, with overlays."""
    run = spec.run_dir
    config = _read_json(run / "config.json")
    target_means = np.asarray(config["options"]["target_means"], dtype=float)
    midline = _guide_path(_read_json(run / "protocol_baseline.json"))
    variants = ("baseline", "optimized")
    n_cols = len(columns)

    fig, axes = plt.subplots(2, n_cols, figsize=(1.3 * n_cols, 2.9),
                             sharex=True, sharey=True)
    for r, variant in enumerate(variants):
        clouds = _snapshot_by_time(run, variant)
        guide = _guide_path(_read_json(run / f"protocol_{variant}.json"))
        color = _VARIANT_COLORS[variant]
        for c, t in enumerate(columns):
            ax = axes[r, c]
            key = round(float(t), 6)
            if key not in clouds:
                raise FileNotFoundError(
                    f"no snapshot at t={t:g} for variant {variant!r} under "
                    f"{run / 'snapshots'}"
                )
            x0, x1 = clouds[key]
            ax.plot(midline[:, 0], midline[:, 1], "--", color="0.6",
                    lw=0.8, zorder=1)
            ax.plot(guide[:, 0], guide[:, 1], "-", color="0.35",
                    lw=0.8, zorder=2)
            ax.scatter(x0, x1, s=1.5, color=color, alpha=0.5,
                       linewidths=0, zorder=3)
            ax.scatter(target_means[:, 0], target_means[:, 1], marker="*",
                       s=35, color="black", zorder=4)
            if r == 0:
                ax.set_title(f"t = {t:g}")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r, 0].set_ylabel(variant)
    fig.tight_layout(pad=0.3)
    return fig


def fig_e1_comparison(spec: PanelSpec) -> plt.Figure:
    return _scatter_grid(spec, SNAPSHOT_COLUMNS)


def fig_e2_comparison(spec: PanelSpec) -> plt.Figure:
    return _scatter_grid(spec, SNAPSHOT_COLUMNS)


def fig_e2_merging(spec: PanelSpec) -> plt.Figure:
    fig = _scatter_grid(spec, MERGE_COLUMNS)
    source = _read_csv(spec.run_dir / "snapshots" / "initial_positions.csv")
    for ax in fig.axes:
        ax.scatter(source["x_0"], source["x_1"], s=4, marker="x",
                   color="tab:green", linewidths=0.6, zorder=5)
    return fig


def _loss_axes(ax, trace: np.ndarray, label_prefix: str = "") -> None:
    ax.plot(trace["iteration"], trace["corridor_loss"],
            label=f"{label_prefix}corridor")
    ax.plot(trace["iteration"], trace["total_loss"], "--",
            label=f"{label_prefix}total")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")


def fig_e1_loss(spec: PanelSpec) -> plt.Figure:
    trace = _read_csv(spec.run_dir / "traces" / "optimization.csv")
    fig, ax = plt.subplots(figsize=(4.0, 2.8))
    _loss_axes(ax, trace)
    ax.legend()
    fig.tight_layout()
    return fig


def _params_axes(axes, params: np.ndarray, color, label: str) -> None:
    axes[0].plot(params["s"], params["rho"], "o-", ms=3, color=color,
                 label=label)
    axes[1].plot(params["s"], params["beta_perp"], "o-", ms=3, color=color,
                 label=label)
    axes[0].set_ylabel("transverse offset")
    axes[1].set_ylabel("transverse stiffness")
    for ax in axes:
        ax.set_xlabel("interval midpoint s")


def fig_e1_params(spec: PanelSpec) -> plt.Figure:
    params = _read_csv(spec.run_dir / "traces" / "params.csv")
    fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.6))
    _params_axes(axes, params, "tab:orange", "optimized")
    fig.tight_layout()
    return fig


_E3_CASES = ("sigma_plus", "sigma_zero", "sigma_minus")
_E3_COLORS = {"sigma_plus": "tab:red", "sigma_zero": "0.4",
              "sigma_minus": "tab:blue"}


def fig_e3_loss(spec: PanelSpec) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(4.0, 2.8))
    for case in _E3_CASES:
        trace = _read_csv(spec.run_dir / "traces" / f"{case}_optimization.csv")
        ax.plot(trace["iteration"], trace["corridor_loss"],
                color=_E3_COLORS[case], label=case)
    ax.set_xlabel("iteration")
    ax.set_ylabel("corridor loss")
    ax.legend()
    fig.tight_layout()
    return fig


def fig_e3_params(spec: PanelSpec) -> plt.Figure:
    fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.6))
    for case in _E3_CASES:
        params = _read_csv(spec.run_dir / "traces" / f"{case}_params.csv")
        _params_axes(axes, params, _E3_COLORS[case], case)
    axes[0].legend()
    fig.tight_layout()
    return fig


def _h1_rows(spec: PanelSpec) -> tuple[np.ndarray, dict, dict]:
    table = _read_csv(spec.run_dir / "h1_table.csv")
    summary = _read_json(spec.run_dir / "summary.json")
    manifest = _read_json(spec.run_dir / "manifest.json")
    return np.atleast_1d(table), summary, manifest


def fig_h1_main(spec: PanelSpec) -> plt.Figure:
    """2x2 diagnostics vs dimension at the dimension-sweep mode count."""
    table, summary, manifest = _h1_rows(spec)
    code_of = summary["variant_code"]
    M = int(summary["scenarios"][0]["M"])  # dimension sweep comes first
    fig, axes = plt.subplots(2, 2, figsize=(5.6, 4.2))
    (ax_tv, ax_guide), (ax_br, ax_pre) = axes
    for variant, code in code_of.items():
        rows = table[(table["variant_code"] == code) & (table["M"] == M)]
        rows = rows[np.argsort(rows["d"])]
        d = rows["d"]
        color = _H1_COLORS[variant]
        ax_tv.plot(d, rows["tv_error"], "o-", ms=3, color=color, label=variant)
        ax_guide.plot(d, rows["guide_cost"], "o-", ms=3, color=color)
        ax_br.plot(d, rows["branching_time"], "o-", ms=3, color=color)
        pre = [manifest["timings_ms"][f"h1_d{int(dd)}_M{M}_{variant}_precompute_ms"]
               for dd in d]
        ax_pre.plot(d, pre, "o-", ms=3, color=color)
    ax_br.axhline(0.5, color="black", ls=":", lw=0.9)
    for ax, title in zip(axes.ravel(),
                         ("terminal TV error", "integrated guide cost",
                          "branching time", "precompute [ms]")):
        ax.set_title(title)
        ax.set_xlabel("dimension d")
        ax.set_xscale("log", base=2)
    ax_tv.legend()
    fig.tight_layout()
    return fig


def fig_h1_modes(spec: PanelSpec) -> plt.Figure:
    """TV and branching time vs mode count at the mode-sweep dimension."""
    table, summary, _ = _h1_rows(spec)
    code_of = summary["variant_code"]
    d = int(summary["scenarios"][-1]["d"])  # mode sweep comes last
    fig, axes = plt.subplots(1, 2, figsize=(5.6, 2.4))
    for variant, code in code_of.items():
        rows = table[(table["variant_code"] == code) & (table["d"] == d)]
        rows = rows[np.argsort(rows["M"])]
        color = _H1_COLORS[variant]
        axes[0].plot(rows["M"], rows["tv_error"], "o-", ms=3, color=color,
                     label=variant)
        axes[1].plot(rows["M"], rows["branching_time"], "o-", ms=3, color=color)
    axes[1].axhline(0.5, color="black", ls=":", lw=0.9)
    axes[0].set_ylabel("terminal TV error")
    axes[1].set_ylabel("branching time")
    for ax in axes:
        ax.set_xlabel("modes M")
        ax.set_xscale("log", base=2)
    axes[0].legend()
    fig.tight_layout()
    return fig


def fig_h1_subspace(spec: PanelSpec) -> plt.Figure:
    """Empirical vs analytic per-block variance traces, one panel per block."""
    data = _read_csv(spec.run_dir / "traces" / "subspace_check.csv")
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.4), sharex=True)
    for ax, block in zip(axes, ("trunk", "branch", "local")):
        ax.plot(data["t"], data[f"analytic_{block}"], "-", color="black",
                label="analytic")
        ax.plot(data["t"], data[f"empirical_{block}"], "--", color="tab:red",
                label="empirical")
        ax.set_title(block)
        ax.set_xlabel("t")
    axes[0].set_ylabel("block variance trace")
    axes[0].legend()
    fig.tight_layout()
    return fig


# ---------------------------------------------------------------------------
# Registry and rendering
# ---------------------------------------------------------------------------


FIGURES: dict = {
    "e1_comparison": (fig_e1_comparison,
                      ("config.json", "protocol_baseline.json",
                       "protocol_optimized.json", "snapshots/baseline_*.csv",
                       "snapshots/optimized_*.csv")),
    "e1_loss": (fig_e1_loss, ("traces/optimization.csv",)),
    "e1_params": (fig_e1_params, ("traces/params.csv",)),
    "e2_comparison": (fig_e2_comparison,
                      ("config.json", "protocol_baseline.json",
                       "protocol_optimized.json", "snapshots/baseline_*.csv",
                       "snapshots/optimized_*.csv")),
    "e2_merging": (fig_e2_merging,
                   ("config.json", "protocol_baseline.json",
                    "protocol_optimized.json", "snapshots/baseline_*.csv",
                    "snapshots/optimized_*.csv",
                    "snapshots/initial_positions.csv")),
    "h1_main": (fig_h1_main, ("h1_table.csv", "summary.json", "manifest.json")),
    "h1_subspace": (fig_h1_subspace, ("traces/subspace_check.csv",)),
    "h1_modes": (fig_h1_modes, ("h1_table.csv", "summary.json")),
    "e3_loss": (fig_e3_loss, tuple(f"traces/{c}_optimization.csv"
                                   for c in _E3_CASES)),
    "e3_params": (fig_e3_params, tuple(f"traces/{c}_params.csv"
                                       for c in _E3_CASES)),
}


def panel_spec(figure: str, run_dir, out) -> PanelSpec:
    if figure not in FIGURES:
        raise ValueError(
            f"unknown figure {figure!r}; expected one of {sorted(FIGURES)}"
        )
    return PanelSpec(figure=figure, run_dir=Path(run_dir), out=Path(out),
                     input_globs=FIGURES[figure][1])


def render(spec: PanelSpec) -> Path:
    """Render one panel to `spec.out`; raises if any input glob is unmatched."""
    missing = spec.missing_globs()
    if missing:
        raise FileNotFoundError(
            f"figure {spec.figure!r}: missing inputs under {spec.run_dir}: "
            + ", ".join(missing)
        )
    func = FIGURES[spec.figure][0]
    with plt.rc_context(_STYLE):
        fig = func(spec)
        spec.out.parent.mkdir(parents=True, exist_ok=True)
        # empty metadata keeps the PNG bytes reproducible across library builds
        fig.savefig(spec.out, metadata={"Software": None})
        plt.close(fig)
    return spec.out
