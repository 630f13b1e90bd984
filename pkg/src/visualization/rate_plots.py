"""
Rate Plots
Log-linear charts of estimate series with error bars and fitted exponential rates
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import seaborn as sns  # noqa: E402

from src.core.ergodic_stats import EstimateSeries, RateFit  # noqa: E402
from src.utils.io import read_series  # noqa: E402

logger = logging.getLogger(__name__)

# SVG output carries no timestamp
_SVG_METADATA = {"Date": None}


class RatePlotter:
    """
    SVG charts for the decay experiments

    Creates:
    - |estimate| against n on a log axis, with ±stderr bars and the fitted line
    - overlays of several series on one chart
    """

    def __init__(self, output_dir: str = "results/plots"):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(exist_ok=True, parents=True)

        sns.set_theme(style="whitegrid")
        plt.rcParams["figure.figsize"] = (8, 5)
        plt.rcParams["font.size"] = 10
        plt.rcParams["svg.hashsalt"] = "datorus"

    def _draw(self, ax, series: EstimateSeries, fit: Optional[RateFit], label: str):
        est = np.abs(series.estimates)
        keep = est > 0
        n, est, err = series.n_values[keep], est[keep], series.stderrs[keep]
        lower = np.minimum(err, est * 0.999)
        ax.errorbar(n, est, yerr=[lower, err], fmt="o", ms=4, capsize=2, label=label)
        if fit is not None and np.isfinite(fit.rate):
            lo, hi = fit.fit_range
            xs = np.linspace(lo, hi, 50)
            ax.plot(xs, np.exp(fit.log_intercept + fit.rate * xs), "--",
                    label=f"{label} fit: τ={fit.tau:.3f}, r²={fit.r_squared:.3f}")

    def plot_series(
        self,
        series: EstimateSeries,
        fit: Optional[RateFit] = None,
        title: str = "",
        ylabel: str = "|estimate|",
        output_filename: str = "series.svg",
    ) -> Path:
        logger.info(f"Creating rate chart {output_filename}...")
        fig, ax = plt.subplots()
        self._draw(ax, series, fit, series.name or "series")
        ax.set_yscale("log")
        ax.set_xlabel("n", fontweight="bold")
        ax.set_ylabel(ylabel, fontweight="bold")
        ax.set_title(title or series.name, fontweight="bold")
        ax.legend(fontsize=8)
        fig.tight_layout()

        output_path = self.output_dir / output_filename
        fig.savefig(output_path, format="svg", metadata=_SVG_METADATA)
        plt.close(fig)
        logger.info(f"✓ Saved chart to: {output_path}")
        return output_path

    def plot_overlay(
        self,
        curves: Dict[str, EstimateSeries],
        fits: Optional[Dict[str, Optional[RateFit]]] = None,
        title: str = "",
        ylabel: str = "|estimate|",
        output_filename: str = "overlay.svg",
    ) -> Path:
        fits = fits or {}
        fig, ax = plt.subplots()
        for label, series in curves.items():
            self._draw(ax, series, fits.get(label), label)
        ax.set_yscale("log")
        ax.set_xlabel("n", fontweight="bold")
        ax.set_ylabel(ylabel, fontweight="bold")
        ax.set_title(title, fontweight="bold")
        ax.legend(fontsize=8)
        fig.tight_layout()

        output_path = self.output_dir / output_filename
        fig.savefig(output_path, format="svg", metadata=_SVG_METADATA)
        plt.close(fig)
        logger.info(f"✓ Saved overlay to: {output_path}")
        return output_path

    def plot_directory(self, csv_dir, fits: Optional[Dict[str, RateFit]] = None) -> List[Path]:
        """One chart per series CSV found in csv_dir"""
        fits = fits or {}
        out = []
        for csv in sorted(Path(csv_dir).glob("*.csv")):
            series = read_series(csv)
            out.append(self.plot_series(series, fits.get(csv.stem), output_filename=f"{csv.stem}.svg"))
        return out
