"""Rendering contract: every panel renders, deterministically, with the
documented layouts, from run directories alone."""

import numpy as np
import pytest

from lqgmpid_plots.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main
from lqgmpid_plots.figures import FIGURES, panel_spec, render

ALL_FIGURES = sorted(FIGURES)


@pytest.mark.parametrize("figure", ALL_FIGURES)
def test_every_figure_renders(figure, run_for, tmp_path):
    out = render(panel_spec(figure, run_for(figure), tmp_path / f"{figure}.png"))
    assert out.is_file() and out.stat().st_size > 0


@pytest.mark.parametrize("figure", ALL_FIGURES)
def test_rerender_is_pixel_identical(figure, run_for, tmp_path):
    a = render(panel_spec(figure, run_for(figure), tmp_path / "a.png"))
    b = render(panel_spec(figure, run_for(figure), tmp_path / "b.png"))
    assert a.read_bytes() == b.read_bytes()


class TestLayouts:
    def test_e1_comparison_is_2x9_grid_with_overlays(self, run_for):
        spec = panel_spec("e1_comparison", run_for("e1_comparison"), "unused.png")
        fig = FIGURES["e1_comparison"][0](spec)
        axes = fig.axes
        assert len(axes) == 18
        grid = [ax.get_subplotspec().get_geometry()[:2] for ax in axes]
        assert set(grid) == {(2, 9)}
        for ax in axes:
            # corridor midline + guide overlays, particle cloud + target stars
            assert len(ax.lines) >= 2
            assert len(ax.collections) >= 2

    def test_h1_main_is_2x2_grid_with_release_reference(self, run_for):
        spec = panel_spec("h1_main", run_for("h1_main"), "unused.png")
        fig = FIGURES["h1_main"][0](spec)
        axes = fig.axes
        assert len(axes) == 4
        assert {ax.get_subplotspec().get_geometry()[:2] for ax in axes} == {(2, 2)}
        branching_ax = axes[2]
        assert any(np.allclose(line.get_ydata(), 0.5) for line in branching_ax.lines)
        # one curve per protocol variant on the TV panel
        assert len([ln for ln in axes[0].lines if ln.get_label() in
                    ("B0", "B1", "B2")]) == 3


class TestErrors:
    def test_missing_inputs_are_named(self, tmp_path):
        spec = panel_spec("e1_comparison", tmp_path / "empty", tmp_path / "o.png")
        with pytest.raises(FileNotFoundError, match="protocol_baseline.json"):
            render(spec)

    def test_unknown_figure_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unknown figure"):
            panel_spec("nope", tmp_path, tmp_path / "o.png")


class TestCli:
    def test_render_roundtrip(self, run_for, tmp_path):
        out = tmp_path / "loss.png"
        rc = main(["render", "--run", str(run_for("e1_loss")),
                   "--figure", "e1_loss", "--out", str(out)])
        assert rc == EXIT_OK and out.is_file()

    def test_empty_run_dir_fails(self, tmp_path):
        rc = main(["render", "--run", str(tmp_path), "--figure", "h1_main",
                   "--out", str(tmp_path / "o.png")])
        assert rc == EXIT_FAILURE

    def test_bad_figure_is_config_error(self, tmp_path):
        rc = main(["render", "--run", str(tmp_path), "--figure", "bogus",
                   "--out", str(tmp_path / "o.png")])
        assert rc == EXIT_CONFIG
