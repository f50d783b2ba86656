"""Portable checkpoint files.

Layout: an 8-byte magic ``SEUTCKPT``, a 32-bit little-endian format version,
a UTF-8 text header of ``key: value`` lines terminated by one blank line, and
then the raw payload. The header carries the variant/build hyperparameters,
epoch, seed, optimizer scalars, and an ordered tensor directory of
``tensor: <name> <dtype> <d0>x<d1>x... <byte offset>`` lines. The payload is
the little-endian IEEE-754 float32 tensors, row-major, in directory order.

A save/load round trip reproduces every tensor bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import SeUNetTrans, build_variant
from .train import Adam

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedCheckpointError",
    "CheckpointMeta",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"SEUTCKPT"
VERSION = 1


class CheckpointError(Exception):
    """Malformed or inconsistent checkpoint file."""


class BadMagicError(CheckpointError):
    """The file is not a checkpoint (magic bytes differ)."""


class UnsupportedVersionError(CheckpointError):
    """The checkpoint format version is not understood."""


class TruncatedCheckpointError(CheckpointError):
    """The tensor payload (or header) ends before the directory says it should."""


@dataclass
class CheckpointMeta:
    variant: str
    epoch: int
    seed: int
    optimizer_step: int


def _collect_tensors(model: SeUNetTrans, optimizer: Optional[Adam]) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        entries.append((f"param.{name}", p.data))
    for name, buf in model.named_buffers():
        entries.append((f"buffer.{name}", buf))
    if optimizer is not None:
        state = optimizer.state_dict()
        for name, arr in state["m"].items():
            entries.append((f"adam_m.{name}", arr))
        for name, arr in state["v"].items():
            entries.append((f"adam_v.{name}", arr))
    return entries


def save_checkpoint(
    path: Path,
    model: SeUNetTrans,
    optimizer: Optional[Adam] = None,
    epoch: int = 0,
    seed: int = 0,
) -> Path:
    path = Path(path)
    spec = model.spec
    if model.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 models, got {model.dtype}")
    tensors = _collect_tensors(model, optimizer)

    lines = [
        f"variant: {spec.name}",
        f"epoch: {epoch}",
        f"seed: {seed}",
        f"in_channels: {spec.in_channels}",
        f"encoder_widths: {','.join(str(w) for w in spec.encoder_widths)}",
        f"bottleneck_width: {spec.bottleneck_width}",
        f"cbr_widths: {','.join(str(w) for w in spec.cbr_widths)}",
        f"embed_dim: {spec.embed_dim}",
        f"num_heads: {spec.num_heads}",
        f"depth: {spec.depth}",
    ]
    if optimizer is not None:
        lines += [
            f"optimizer_step: {optimizer.step_count}",
            f"lr: {optimizer.lr!r}",
            f"beta1: {optimizer.beta1!r}",
            f"beta2: {optimizer.beta2!r}",
            f"eps: {optimizer.eps!r}",
            f"weight_decay: {optimizer.weight_decay!r}",
        ]
    offset = 0
    blobs: list[bytes] = []
    for name, arr in tensors:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(d) for d in arr32.shape)
        lines.append(f"tensor: {name} f32 {shape} {offset}")
        blob = arr32.tobytes()
        blobs.append(blob)
        offset += len(blob)

    header = "\n".join(lines) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(header.encode("utf-8"))
        for blob in blobs:
            fh.write(blob)
    return path


def _parse_header(text: str) -> tuple[dict[str, str], list[tuple[str, str, tuple[int, ...], int]]]:
    keys: dict[str, str] = {}
    directory: list[tuple[str, str, tuple[int, ...], int]] = []
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition(": ")
        if not value:
            raise CheckpointError(f"malformed header line {line!r}")
        if key == "tensor":
            parts = value.split(" ")
            if len(parts) != 4:
                raise CheckpointError(f"malformed tensor directory line {line!r}")
            name, dtype, shape_text, off = parts
            shape = tuple(int(d) for d in shape_text.split("x"))
            directory.append((name, dtype, shape, int(off)))
        else:
            keys[key] = value
    return keys, directory


def load_checkpoint(path: Path) -> tuple[SeUNetTrans, Adam, CheckpointMeta]:
    """Rebuild the model and optimizer recorded in ``path``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise BadMagicError(f"{path} is not a checkpoint: file too short")
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint: bad magic")
    (version,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    body = raw[len(MAGIC) + 4 :]
    terminator = body.find(b"\n\n")
    if terminator < 0:
        raise TruncatedCheckpointError(f"{path}: header never terminated by a blank line")
    keys, directory = _parse_header(body[:terminator].decode("utf-8"))
    payload = body[terminator + 2 :]

    try:
        spec = build_variant(
            keys["variant"],
            encoder_widths=tuple(int(w) for w in keys["encoder_widths"].split(",")),
            cbr_widths=tuple(int(w) for w in keys["cbr_widths"].split(",")),
            bottleneck_width=int(keys["bottleneck_width"]),
            embed_dim=int(keys["embed_dim"]),
            bridge_channels=int(keys["embed_dim"]),
            num_heads=int(keys["num_heads"]),
            depth=int(keys["depth"]),
            in_channels=int(keys.get("in_channels", "3")),
        )
        epoch = int(keys["epoch"])
        seed = int(keys["seed"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing header key {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape, off in directory:
        if dtype != "f32":
            raise CheckpointError(f"{path}: unsupported tensor dtype {dtype!r}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(payload):
            raise TruncatedCheckpointError(
                f"{path}: tensor {name} needs bytes [{off}, {off + nbytes}) "
                f"but payload has {len(payload)}"
            )
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)

    model = SeUNetTrans(spec, seed=seed)
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {key}")
        if arrays[key].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {key} has shape {arrays[key].shape}, expected {p.data.shape}"
            )
        p.data = arrays[key].copy()
    for name, buf in model.named_buffers():
        key = f"buffer.{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {key}")
        buf[...] = arrays[key]

    optimizer = Adam(
        model.parameters(),
        lr=float(keys.get("lr", 1e-4)),
        betas=(float(keys.get("beta1", 0.9)), float(keys.get("beta2", 0.999))),
        eps=float(keys.get("eps", 1e-8)),
        weight_decay=float(keys.get("weight_decay", 1e-4)),
    )
    optimizer.step_count = int(keys.get("optimizer_step", 0))
    names = [p.name for p in optimizer.params]
    for i, name in enumerate(names):
        key_m, key_v = f"adam_m.{name}", f"adam_v.{name}"
        if key_m in arrays:
            optimizer.m[i] = arrays[key_m].copy()
        if key_v in arrays:
            optimizer.v[i] = arrays[key_v].copy()

    meta = CheckpointMeta(
        variant=spec.name,
        epoch=epoch,
        seed=seed,
        optimizer_step=optimizer.step_count,
    )
    return model, optimizer, meta
