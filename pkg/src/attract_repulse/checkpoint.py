"""Versioned binary checkpoints.

Layout (little endian)::

    offset 0   8 bytes   magic b"ARCKPT\\x00\\x00"
    offset 8   uint32    format version
    offset 12  uint32    header length H
    offset 16  H bytes   UTF-8 JSON header (config, digest, step, payload size and sha256)
    16 + H     payload   torch-serialized tensors (student, teacher, optimizer, RNG)

A file is validated completely before any state is built, so a bad file
never leaves a half-restored run behind.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import RunConfig
from .exceptions import CheckpointError
from .train import TrainState, init_state

MAGIC = b"ARCKPT\x00\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    version: int
    header: dict
    payload: dict

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_dict(self.header["config"])

    @property
    def step(self) -> int:
        return int(self.header["step"])

    def restore(self) -> TrainState:
        """Rebuild a :class:`TrainState` that continues bit-identically."""
        cfg = self.config
        dtype = getattr(torch, self.header.get("dtype", "float32"))
        state = init_state(cfg.model, cfg.loss, cfg.augment,
                           cfg.train.schedule(int(self.header["steps_per_epoch"])),
                           cfg.train.optim, cfg.seed, cfg.train.batch_size, dtype=dtype)
        state.model.load_state_dict(self.payload["student"])
        state.teacher.load_state_dict(self.payload["teacher"])
        state.optimizer.load_state_dict(self.payload["optimizer"])
        state.step = self.step
        torch.set_rng_state(self.payload["torch_rng"])
        return state


def save_checkpoint(state: TrainState, path, config: RunConfig, extra: dict | None = None) -> Path:
    buf = io.BytesIO()
    torch.save({
        "student": state.model.state_dict(),
        "teacher": state.teacher.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }, buf)
    payload = buf.getvalue()
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "step": state.step,
        "steps_per_epoch": state.schedule.steps_per_epoch,
        "dtype": str(next(state.model.parameters()).dtype).replace("torch.", ""),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    return _read(path, with_payload=False).header


def load_checkpoint(path) -> Checkpoint:
    return _read(path, with_payload=True)


def _read(path, with_payload: bool) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated in the fixed prefix ({len(raw)} of {_PREFIX.size} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} at offset 8 is not supported (expected {FORMAT_VERSION})"
        )
    hend = _PREFIX.size + hlen
    if len(raw) < hend:
        raise CheckpointError(
            f"{path}: truncated header, need bytes {_PREFIX.size}..{hend} but file ends at {len(raw)}"
        )
    try:
        header = json.loads(raw[_PREFIX.size:hend])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header at offset {_PREFIX.size}: {exc}") from None
    want = int(header["payload_bytes"])
    payload_raw = raw[hend:]
    if len(payload_raw) != want:
        raise CheckpointError(
            f"{path}: payload at offset {hend} has {len(payload_raw)} bytes, header declares {want}"
        )
    if hashlib.sha256(payload_raw).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (offset {hend})")
    payload = {}
    if with_payload:
        payload = torch.load(io.BytesIO(payload_raw), weights_only=True)
    return Checkpoint(version, header, payload)
