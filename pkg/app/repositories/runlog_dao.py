import logging
from typing import List

import pandas as pd

from app.models.results import RunLog
from app.repositories.base_dao import BaseDAO, PathLike

logger = logging.getLogger(__name__)


class RunLogDAO(BaseDAO):
    """Табличные журналы обучения: RunLog и кривые потерь предобучения"""

    def save_runlog(self, path: PathLike, log: RunLog):
        frame = pd.DataFrame(log.rows(), columns=log.columns())
        frame["iter"] = frame["iter"].astype("int64")
        frame["diff_evals"] = frame["diff_evals"].astype("int64")
        path = self.write_text(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
        logger.info(f"RunLog with {len(log.records)} records saved to {path}")
        return path

    def load_runlog(self, path: PathLike) -> pd.DataFrame:
        return pd.read_csv(path)

    def save_losses(self, path: PathLike, losses: List[float]):
        """Кривая потерь: step, loss"""
        frame = pd.DataFrame({"step": range(1, len(losses) + 1), "loss": losses})
        return self.write_text(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
