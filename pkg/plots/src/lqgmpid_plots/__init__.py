"""Matplotlib figure rendering for experiment run directories."""

from .figures import FIGURES, PanelSpec, panel_spec, render

__all__ = ["FIGURES", "PanelSpec", "panel_spec", "render"]
