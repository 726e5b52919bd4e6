"""Binary model snapshots: a text header plus raw little-endian float32 data.

Layout: one magic line, one JSON header line (architecture, seed, epoch,
optimizer hyper-parameters, curriculum state, and the tensor manifest), then
every parameter array in the header's order as little-endian float32, followed
by the optimizer's momentum buffers in the same order when present.  The JSON
is serialized with sorted keys and fixed separators, so saving a loaded
checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import ClassifierConfig, MsopClassifier
from .curriculum import CurriculumState
from .tensor import SGD

MAGIC = b"MSOP-CKPT 1\n"


class CheckpointError(ValueError):
    """The file is not a compatible checkpoint."""


@dataclass
class Checkpoint:
    model: MsopClassifier
    seed: int
    epoch: int
    optimizer_state: dict | None
    curriculum_state: CurriculumState | None
    momentum_buffers: list[np.ndarray] | None

    def make_optimizer(self) -> SGD:
        """Rebuild the optimizer with its persisted hyper-parameters and buffers."""
        if self.optimizer_state is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        opt = SGD(self.model.param_tensors(),
                  lr=self.optimizer_state["lr"],
                  momentum=self.optimizer_state["momentum"],
                  weight_decay=self.optimizer_state["weight_decay"])
        if self.momentum_buffers is not None:
            for buf, saved in zip(opt.buffers, self.momentum_buffers, strict=True):
                buf[...] = saved
        return opt


def save_checkpoint(path, model: MsopClassifier, seed: int, epoch: int = 0,
                    optimizer: SGD | None = None,
                    curriculum_state: CurriculumState | None = None) -> None:
    named = model.parameters()
    header = {
        "arch": model.config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "tensors": [[name, list(t.shape)] for name, t in named],
        "optimizer": None,
        "curriculum": curriculum_state.to_dict() if curriculum_state else None,
        "has_momentum_buffers": optimizer is not None,
    }
    if optimizer is not None:
        header["optimizer"] = {"lr": optimizer.lr, "momentum": optimizer.momentum,
                               "weight_decay": optimizer.weight_decay}
    blob = bytearray()
    for _, t in named:
        blob += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    if optimizer is not None:
        for buf in optimizer.buffers:
            blob += np.ascontiguousarray(buf, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        try:
            header = json.loads(fh.readline().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
        blob = fh.read()

    config = ClassifierConfig.from_dict(header["arch"])
    model = MsopClassifier(config, seed=header["seed"])
    named = model.parameters()
    expected = [[name, list(t.shape)] for name, t in named]
    if expected != header["tensors"]:
        raise CheckpointError(f"{path}: architecture does not match this build")

    counts = [int(np.prod(shape)) for _, shape in header["tensors"]]
    need = sum(counts) * (2 if header.get("has_momentum_buffers") else 1)
    if len(blob) != 4 * need:
        raise CheckpointError(f"{path}: expected {4 * need} data bytes, "
                              f"found {len(blob)}")

    offset = 0
    for (_, t), count in zip(named, counts):
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        t.data = arr.astype(t.data.dtype).reshape(t.shape)
        offset += 4 * count
    buffers = None
    if header.get("has_momentum_buffers"):
        buffers = []
        for (_, t), count in zip(named, counts):
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            buffers.append(arr.astype(np.float64).reshape(t.shape))
            offset += 4 * count

    cur = header.get("curriculum")
    return Checkpoint(
        model=model,
        seed=int(header["seed"]),
        epoch=int(header["epoch"]),
        optimizer_state=header.get("optimizer"),
        curriculum_state=CurriculumState.from_dict(cur) if cur else None,
        momentum_buffers=buffers,
    )
