"""Single-file binary checkpoints.

Layout: 8-byte magic ``AFGCKPT\\x00``, little-endian uint32 format version,
uint64 header length, a UTF-8 JSON header, then the raw little-endian float64
blocks listed in the header (name, shape, byte offset) in order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .optim import Adam
from .text import Vocabulary

MAGIC = b"AFGCKPT\x00"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: Vocabulary
    tensors: dict[str, np.ndarray]
    prototype_rows: dict[int, int] | None = None
    epoch: int = 0
    best_val_aiou: float = float("-inf")
    best_epoch: int = -1
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0

    def to_bytes(self) -> bytes:
        blocks = [(f"param/{k}", v) for k, v in self.tensors.items()]
        blocks += [(f"adam/{k}", v) for k, v in self.optimizer.items()]
        index, offset = [], 0
        for name, arr in blocks:
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        header = {
            "version": VERSION,
            "config": self.config.to_dict(),
            "vocab": self.vocab.dumps(),
            "prototype_rows": None if self.prototype_rows is None
            else [[int(k), int(v)] for k, v in self.prototype_rows.items()],
            "epoch": self.epoch,
            "best_val_aiou": repr(float(self.best_val_aiou)),
            "best_epoch": self.best_epoch,
            "optimizer_step": self.optimizer_step,
            "blocks": index,
        }
        head = json.dumps(header, sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks)
        return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, head_len = struct.unpack("<IQ", raw[8:20])
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[20:20 + head_len].decode())
        body = raw[20 + head_len:]
        tensors, adam = {}, {}
        for blk in header["blocks"]:
            n = int(np.prod(blk["shape"])) if blk["shape"] else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=blk["offset"]).reshape(blk["shape"]).copy()
            kind, name = blk["name"].split("/", 1)
            (tensors if kind == "param" else adam)[name] = arr
        rows = header["prototype_rows"]
        return cls(
            config=RunConfig.from_dict(header["config"]),
            vocab=Vocabulary.loads(header["vocab"]),
            tensors=tensors,
            prototype_rows=None if rows is None else {k: v for k, v in rows},
            epoch=header["epoch"],
            best_val_aiou=float(header["best_val_aiou"]),
            best_epoch=header["best_epoch"],
            optimizer=adam,
            optimizer_step=header["optimizer_step"],
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def capture(model, optimizer: Adam | None = None, epoch: int = 0, best_val_aiou: float = float("-inf"),
            best_epoch: int = -1) -> Checkpoint:
    tensors = {k: p.data.copy() for k, p in model.named_parameters().items()}
    opt = {}
    if optimizer is not None:
        for k in optimizer.m:
            opt[f"m/{k}"] = optimizer.m[k].copy()
            opt[f"v/{k}"] = optimizer.v[k].copy()
    rows = dict(model.prototypes.rows) if model.prototypes is not None else None
    return Checkpoint(model.config, model.vocab, tensors, rows, epoch, best_val_aiou, best_epoch, opt,
                      optimizer.step_count if optimizer is not None else 0)


def restore(ckpt: Checkpoint):
    """Rebuild the model (and optimizer state) held by ``ckpt``."""
    from .model import AffordanceModel

    model = AffordanceModel(ckpt.config, ckpt.vocab)
    params = model.named_parameters()
    missing = set(params) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, p in params.items():
        p.data = ckpt.tensors[k].copy()
    if model.prototypes is not None:
        model.prototypes.rows = dict(ckpt.prototype_rows or {})
    opt = Adam(ckpt.config.adam_beta1, ckpt.config.adam_beta2, ckpt.config.adam_eps, ckpt.config.weight_decay)
    opt.step_count = ckpt.optimizer_step
    for key, arr in ckpt.optimizer.items():
        kind, name = key.split("/", 1)
        (opt.m if kind == "m" else opt.v)[name] = arr.copy()
    return model, opt
