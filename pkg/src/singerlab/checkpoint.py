"""Flat binary checkpoint format ("SNGR").

Layout (all integers little-endian):

    magic "SNGR" | version u32 | n_tensors u32 | manifest_len u64 | payload_len u64
    directory, n_tensors entries:
        name_len u16 | name utf8 | dtype u8 | rank u8 | dims u64 * rank | offset u64 | nbytes u64
    manifest utf8 (manifest_len bytes)
    payload (payload_len bytes); offsets are relative to the payload start

Tensors are written in sorted name order, back to back, so identical states
give identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SNGR"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    manifest: str = ""
    meta: dict = field(default_factory=dict)


def encode(tensors: dict[str, np.ndarray], manifest: str = "") -> bytes:
    names = sorted(tensors)
    directory = b""
    blobs = []
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name])
        code = CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        encoded = name.encode("utf-8")
        directory += struct.pack("<H", len(encoded)) + encoded
        directory += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        directory += struct.pack("<QQ", offset, len(raw))
        blobs.append(raw)
        offset += len(raw)
    man = manifest.encode("utf-8")
    header = MAGIC + struct.pack("<IIQQ", VERSION, len(names), len(man), offset)
    return header + directory + man + b"".join(blobs)


def save_checkpoint(tensors: dict[str, np.ndarray], path, manifest: str = "") -> None:
    if len(set(tensors)) != len(tensors):
        raise CheckpointError("duplicate tensor names")
    Path(path).write_bytes(encode(tensors, manifest))


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise CheckpointError(f"truncated checkpoint: {what} needs bytes [{offset}, {offset + n}), file has {len(buf)}")


def decode(buf: bytes) -> Checkpoint:
    _need(buf, 0, 4, "magic")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at byte 0, expected {MAGIC!r}")
    _need(buf, 4, 24, "header")
    version, count, man_len, payload_len = struct.unpack_from("<IIQQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 28
    entries = []
    for _ in range(count):
        _need(buf, off, 2, "directory entry")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        _need(buf, off, nlen + 2, "directory entry")
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code} at byte {off - 2}")
        _need(buf, off, 8 * rank + 16, "directory entry")
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        t_off, nbytes = struct.unpack_from("<QQ", buf, off)
        off += 16
        entries.append((name, DTYPES[code], dims, t_off, nbytes))
    _need(buf, off, man_len, "manifest")
    manifest = buf[off : off + man_len].decode("utf-8")
    off += man_len
    base = off
    _need(buf, base, payload_len, "payload")
    if base + payload_len != len(buf):
        raise CheckpointError(f"{len(buf) - base - payload_len} trailing bytes after payload")

    tensors = {}
    spans = []
    for name, dtype, dims, t_off, nbytes in entries:
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(f"{name}: directory says {nbytes} bytes, shape {dims} needs {expected}")
        if t_off + nbytes > payload_len:
            raise CheckpointError(f"{name}: block [{t_off}, {t_off + nbytes}) exceeds payload of {payload_len} bytes")
        spans.append((t_off, t_off + nbytes, name))
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=base + t_off)
        tensors[name] = arr.reshape(dims).astype(dtype.newbyteorder("="))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"tensor blocks {an!r} and {bn!r} overlap")
    return Checkpoint(tensors, manifest)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# -- model files ---------------------------------------------------------------
# A model checkpoint stores the weights plus a manifest of "model.*" spec keys,
# the artifact plan and the training accuracy.


def save_model(model, path) -> None:
    from .config import plan_to_text, spec_to_text

    manifest = spec_to_text("model", model.spec) + plan_to_text(model.artifact_plan)
    if "train_accuracy" in model.meta:
        manifest += f"train_accuracy = {float(model.meta['train_accuracy'])!r}\n"
    save_checkpoint(model.state_dict(), path, manifest)


def load_model(path):
    """Rebuild a VitModel (with its artifact plan re-applied) from a model checkpoint."""
    from .config import ConfigError, parse_pairs, plan_from_pairs, spec_from_pairs
    from .vit import ModelError, from_state, inject_artifacts

    ckpt = load_checkpoint(path)
    try:
        pairs = parse_pairs(ckpt.manifest)
        spec = spec_from_pairs(pairs, "model")
        plan = plan_from_pairs(pairs)
        model = from_state(spec, ckpt.tensors)
    except (ConfigError, ModelError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a model checkpoint ({exc})") from exc
    if "train_accuracy" in pairs:
        model.meta["train_accuracy"] = float(pairs["train_accuracy"])
    if plan is not None:
        model = inject_artifacts(model, plan)
    return model
