"""
SVG-графики кривых обучения. Графики - удобство; контракт - CSV.
"""
import io
import logging
from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.models.results import RunLog  # noqa: E402
from app.repositories.base_dao import BaseDAO  # noqa: E402

logger = logging.getLogger(__name__)

# Фиксированная соль: id элементов SVG не меняются между запусками
plt.rcParams["svg.hashsalt"] = "r0-desk"


class PlotService:
    """Построение линейных графиков по RunLog"""

    def __init__(self):
        self.dao = BaseDAO()

    def line_plot(self, path: Path, series: Dict[str, Sequence[float]], title: str, ylabel: str,
                  log_scale: bool = False) -> Path:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, values in series.items():
            ax.plot(range(1, len(values) + 1), list(values), label=label, linewidth=1.2)
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        if log_scale:
            ax.set_yscale("log")
        if series:
            ax.legend(loc="best", fontsize=8)
        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
        plt.close(fig)
        return self.dao.write_bytes(path, buffer.getvalue())

    def runlog_plots(self, out_dir: Path, log: RunLog) -> Dict[str, Path]:
        """Награды, нормы градиентов и косинус reward/reg по итерациям"""
        labels = log.term_labels
        values = {label: log.series(f"{label}.value") for label in labels}
        values["combined"] = log.series("combined_reward")
        norms = {f"{label} raw": log.series(f"{label}.raw_norm") for label in labels}
        norms["reward (params)"] = log.series("reward_grad_norm")
        norms["reg (params)"] = log.series("reg_grad_norm")
        positive = all(v > 0 for seq in norms.values() for v in seq)

        plots = {
            "plot_rewards": self.line_plot(out_dir / "rewards.svg", values, "Reward values", "reward"),
            "plot_grad_norms": self.line_plot(out_dir / "grad_norms.svg", norms, "Gradient norms", "norm",
                                              log_scale=positive),
            "plot_cosine": self.line_plot(out_dir / "cosine.svg", {"cos(reward, reg)": log.series("cos_reward_reg")},
                                          "Reward vs regularization gradient", "cosine"),
        }
        logger.info(f"Plots written to {out_dir}")
        return plots
