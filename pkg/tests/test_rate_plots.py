"""
Tests for the decay charts
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.ergodic_stats import EstimateSeries, fit_exponential  # noqa: E402
from src.utils.io import write_series  # noqa: E402
from src.visualization.rate_plots import RatePlotter  # noqa: E402


def _series(name: str, tau: float) -> EstimateSeries:
    n = np.arange(8)
    return EstimateSeries(n, tau ** n, np.full(8, 1e-6), 1000, 0, name)


class TestRatePlotter:
    def test_series_chart(self, tmp_path):
        series = _series("corr", 0.5)
        path = RatePlotter(str(tmp_path)).plot_series(series, fit_exponential(series), output_filename="corr.svg")
        assert path.exists()
        assert "<svg" in path.read_text()

    def test_charts_are_reproducible(self, tmp_path):
        plotter = RatePlotter(str(tmp_path))
        a = plotter.plot_series(_series("corr", 0.5), output_filename="a.svg").read_text()
        b = plotter.plot_series(_series("corr", 0.5), output_filename="b.svg").read_text()
        assert a == b

    def test_overlay_and_directory(self, tmp_path):
        plotter = RatePlotter(str(tmp_path / "plots"))
        curves = {"fast": _series("fast", 0.3), "slow": _series("slow", 0.8)}
        assert plotter.plot_overlay(curves, output_filename="both.svg").exists()

        for name, series in curves.items():
            write_series(tmp_path / "series" / f"{name}.csv", series, "abc", 0)
        paths = plotter.plot_directory(tmp_path / "series")
        assert [p.name for p in paths] == ["fast.svg", "slow.svg"]
