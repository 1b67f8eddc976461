"""
CSV с сэмплами: строки-комментарии "# key=value" с происхождением,
затем заголовок x1..xd и по строке на точку.
"""
import io
import logging
import math
import re
from typing import Dict, Tuple

import numpy as np
import pandas as pd
import torch

from app.exceptions import SamplesParseError
from app.models.denoiser import DTYPE
from app.models.results import Trajectory
from app.repositories.base_dao import BaseDAO, PathLike

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def coordinate_columns(dim: int):
    return [f"x{j + 1}" for j in range(dim)]


def _to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _parse_float(cell) -> float:
    # Разбор %.17g должен возвращать исходный float64 бит в бит
    try:
        return float(cell)
    except (TypeError, ValueError):
        return math.nan


class SamplesDAO(BaseDAO):
    """Чтение и запись сэмплов и траекторий"""

    def save_samples(self, path: PathLike, samples: torch.Tensor, provenance: Dict[str, object]):
        header = "".join(f"# {key}={value}\n" for key, value in provenance.items())
        frame = pd.DataFrame(samples.detach().cpu().numpy(), columns=coordinate_columns(samples.shape[1]))
        path = self.write_text(path, header + _to_csv(frame))
        logger.info(f"Saved {samples.shape[0]} samples to {path}")
        return path

    def save_trajectory(self, path: PathLike, trajectory: Trajectory):
        """Все состояния x_K .. x_0: step, sigma, sample, x1..xd"""
        frames = []
        for index, (state, sigma) in enumerate(zip(trajectory.states, trajectory.sigmas)):
            values = state.detach().cpu().numpy()
            frame = pd.DataFrame(values, columns=coordinate_columns(values.shape[1]))
            frame.insert(0, "sample", range(values.shape[0]))
            frame.insert(0, "sigma", sigma)
            frame.insert(0, "step", len(trajectory.states) - 1 - index)
            frames.append(frame)
        return self.write_text(path, _to_csv(pd.concat(frames, ignore_index=True)))

    def load_samples(self, path: PathLike) -> Tuple[torch.Tensor, Dict[str, str]]:
        """Разобрать CSV; ошибки содержат номер строки данных (с 1)"""
        text = self.read_text(path)
        provenance = {}
        for line in text.splitlines():
            if line.startswith("#") and "=" in line:
                key, _, value = line[1:].strip().partition("=")
                provenance[key.strip()] = value.strip()

        try:
            frame = pd.read_csv(io.StringIO(text), comment="#", dtype=str, skip_blank_lines=True)
        except pd.errors.EmptyDataError:
            raise SamplesParseError("samples file has no header row")
        except pd.errors.ParserError as exc:
            match = re.search(r"line (\d+)", str(exc))
            raise SamplesParseError(f"malformed samples row: {exc}", row=int(match.group(1)) if match else None)

        expected = coordinate_columns(frame.shape[1])
        if list(frame.columns) != expected:
            raise SamplesParseError(f"expected columns {expected}, got {list(frame.columns)}", row=0)

        values = np.vectorize(_parse_float, otypes=[np.float64])(frame.to_numpy(dtype=object))
        values = values.reshape(frame.shape)
        bad = ~np.isfinite(values).all(axis=1)
        if bool(bad.any()):
            row = int(bad.nonzero()[0][0]) + 1
            raise SamplesParseError(f"non-numeric or non-finite value in data row {row}", row=row)

        samples = torch.tensor(values, dtype=DTYPE).reshape(-1, len(expected))
        return samples, provenance
