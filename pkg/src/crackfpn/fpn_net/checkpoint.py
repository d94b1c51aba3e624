"""Versioned binary checkpoint container.

Layout: magic bytes "FPNCKPT1", a little-endian u32 format version, a
length-prefixed JSON header (model config, training step, base64 RNG state),
a u32 block count, then named parameter blocks. Each block is a u16-prefixed
UTF-8 name, a u8 rank plus u32 dims, a u64 byte count, and the payload as
little-endian 32-bit floats. Integer state (e.g. batch-norm step counters)
is cast through float32, which is exact for the small counts involved.

Files are written to a temp path and renamed, so readers never see a partial
checkpoint. The same block format carries optional external encoder weights.
"""

from __future__ import annotations

import base64
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .model import CrackFPN, ModelConfig

MAGIC = b"FPNCKPT1"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, wrong-version, or shape-mismatched checkpoint."""


@dataclass
class Checkpoint:
    """Decoded checkpoint: config, named float32 blocks, step, RNG state."""

    version: int
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: bytes | None = None


def _state_blocks(module: torch.nn.Module) -> dict[str, np.ndarray]:
    blocks = {}
    for name, tensor in module.state_dict().items():
        blocks[name] = tensor.detach().cpu().numpy().astype(np.float32)
    return blocks


def _write_container(path, header: dict, blocks: dict[str, np.ndarray]) -> None:
    path = Path(path)
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            encoded = name.encode("utf-8")
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            raw = arr.tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim)
            )
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8))
            expect = int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4
            if nbytes != expect:
                raise CheckpointError(f"{path}: block {name!r} size/shape mismatch")
            arr = np.frombuffer(_read_exact(fh, nbytes), dtype="<f4").reshape(shape)
            blocks[name] = arr
    header["version"] = version
    return header, blocks


def save_checkpoint(path, model: CrackFPN, step: int = 0,
                    rng_state: bytes | None = None) -> None:
    """Persist model config plus every parameter and buffer, atomically."""
    if rng_state is None:
        rng_state = torch.get_rng_state().numpy().tobytes()
    header = {
        "kind": "model",
        "config": asdict(model.config),
        "step": int(step),
        "rng_state": base64.b64encode(rng_state).decode("ascii"),
    }
    _write_container(path, header, _state_blocks(model))


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    """Persist an in-memory Checkpoint (e.g. a best-loss snapshot)."""
    header = {
        "kind": "model",
        "config": asdict(ckpt.config),
        "step": int(ckpt.step),
        "rng_state": (
            base64.b64encode(ckpt.rng_state).decode("ascii") if ckpt.rng_state else None
        ),
    }
    blocks = {
        name: np.asarray(arr, dtype=np.float32) for name, arr in ckpt.params.items()
    }
    _write_container(path, header, blocks)


def read_checkpoint(path) -> Checkpoint:
    """Decode a checkpoint file without building a model."""
    header, blocks = _read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        config = ModelConfig(**header["config"])
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from exc
    rng = header.get("rng_state")
    return Checkpoint(
        version=header["version"],
        config=config,
        params=blocks,
        step=int(header.get("step", 0)),
        rng_state=base64.b64decode(rng) if rng else None,
    )


def _apply_blocks(module: torch.nn.Module, blocks: dict[str, np.ndarray],
                  label: str) -> None:
    state = module.state_dict()
    if set(state) != set(blocks):
        missing = sorted(set(state) - set(blocks))
        extra = sorted(set(blocks) - set(state))
        raise CheckpointError(f"{label}: parameter names differ "
                              f"(missing {missing[:3]}, extra {extra[:3]})")
    loaded = {}
    for name, tensor in state.items():
        arr = blocks[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{label}: block {name!r} shape {tuple(arr.shape)} != "
                f"model shape {tuple(tensor.shape)}"
            )
        loaded[name] = torch.from_numpy(arr.copy()).to(tensor.dtype)
    module.load_state_dict(loaded)


def load_checkpoint(path) -> CrackFPN:
    """Rebuild the model a checkpoint describes and restore its weights."""
    ckpt = read_checkpoint(path)
    model = CrackFPN(ckpt.config)
    _apply_blocks(model, ckpt.params, str(path))
    return model


def save_encoder_weights(model: CrackFPN, path) -> None:
    """Write just the encoder weights in the shared block format."""
    header = {"kind": "encoder", "encoder": model.config.encoder}
    _write_container(path, header, _state_blocks(model.encoder))


def load_encoder_weights(model: CrackFPN, path) -> None:
    """Load an external encoder-weight file into a built model."""
    header, blocks = _read_container(path)
    if header.get("kind") != "encoder":
        raise CheckpointError(f"{path}: not an encoder weight file")
    if header.get("encoder") != model.config.encoder:
        raise CheckpointError(
            f"{path}: weights are for encoder {header.get('encoder')!r}, "
            f"model uses {model.config.encoder!r}"
        )
    _apply_blocks(model.encoder, blocks, str(path))
