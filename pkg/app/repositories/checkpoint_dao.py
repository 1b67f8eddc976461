"""
Бинарный формат чекпоинта.

    magic   b"R0CKPT"
    version uint16 LE
    meta    uint32 LE длина + JSON (UTF-8, ключи отсортированы)
    blocks  uint32 LE количество, затем на блок:
            uint16 LE длина имени + имя, uint8 ndim, ndim * uint32 LE размеры,
            float64 LE данные в порядке row-major
"""
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

from app.exceptions import CheckpointFormatError
from app.models.denoiser import DTYPE, Denoiser
from app.models.schemas import CheckpointMetadata, NoiseSchedule
from app.repositories.base_dao import BaseDAO, PathLike

logger = logging.getLogger(__name__)

MAGIC = b"R0CKPT"
VERSION = 1
FLOAT = np.dtype("<f8")


def encode_checkpoint(metadata: CheckpointMetadata, state: Dict[str, torch.Tensor]) -> bytes:
    meta = json.dumps(metadata.model_dump(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(state))]
    for name, tensor in state.items():
        raw_name = name.encode("utf-8")
        array = tensor.detach().cpu().to(DTYPE).numpy()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=FLOAT).tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Tuple[CheckpointMetadata, "OrderedDict[str, torch.Tensor]"]:
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic: not an R0CKPT file")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = reader.unpack("<I")
    try:
        metadata = CheckpointMetadata(**json.loads(reader.take(meta_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint metadata: {exc}")

    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        array = np.frombuffer(reader.take(size * FLOAT.itemsize), dtype=FLOAT).reshape(shape)
        state[name] = torch.from_numpy(array.copy()).to(DTYPE)
    if reader.offset != len(data):
        raise CheckpointFormatError("trailing bytes after the last parameter block")
    return metadata, state


class CheckpointDAO(BaseDAO):
    """Сохранение и загрузка сетей в формате R0CKPT"""

    def save_state(self, path: PathLike, metadata: CheckpointMetadata, state: Dict[str, torch.Tensor]) -> Path:
        path = self.write_bytes(path, encode_checkpoint(metadata, state))
        logger.info(f"Checkpoint saved: {path} ({metadata.role})")
        return path

    def save(self, path: PathLike, net: Denoiser, command: str, role: str, seed: int,
             schedule: NoiseSchedule) -> Path:
        metadata = CheckpointMetadata(
            command=command,
            role=role,
            seed=seed,
            schedule=list(schedule.sigmas),
            schedule_kind=schedule.kind,
            **net.architecture(),
        )
        return self.save_state(path, metadata, net.state_dict())

    def load_raw(self, path: PathLike) -> Tuple[CheckpointMetadata, "OrderedDict[str, torch.Tensor]"]:
        return decode_checkpoint(self.read_bytes(path))

    def load(self, path: PathLike) -> Tuple[Denoiser, CheckpointMetadata]:
        """Загрузить сеть; формы блоков сверяются с архитектурой из метаданных"""
        metadata, state = self.load_raw(path)
        net = Denoiser(metadata.input_dim, metadata.cond_classes, metadata.hidden_layers, metadata.width)
        expected = net.state_dict()
        if list(expected) != list(state):
            raise CheckpointFormatError(f"parameter blocks {list(state)} do not match the architecture")
        for name, tensor in state.items():
            if tuple(tensor.shape) != tuple(expected[name].shape):
                raise CheckpointFormatError(
                    f"block {name} has shape {tuple(tensor.shape)}, expected {tuple(expected[name].shape)}"
                )
        net.load_state_dict(state)
        return net, metadata
