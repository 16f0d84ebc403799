"""Checkpoint container: plain-text header followed by a little-endian float64 payload.

Layout::

    DSLP-CHECKPOINT 1
    config.<field>=<value>          one line per ModelConfig field
    vocab=<tok> <tok> ...           optional
    meta.<key>=<value>              optional, e.g. base model and DSLP flags
    param <name> <d0,d1,...> <byte offset>
    ...
    payload_bytes=<n>
    payload_crc32=<hex>
    END
    <payload>
"""

from __future__ import annotations

import zlib
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from dslp.errors import CheckpointError
from dslp.tensor import Tensor
from dslp.transformer import ModelConfig, ModelParams

MAGIC = "DSLP-CHECKPOINT 1"


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def save_checkpoint(params: ModelParams, path) -> None:
    lines = [MAGIC]
    for f in fields(ModelConfig):
        lines.append(f"config.{f.name}={_fmt(getattr(params.config, f.name))}")
    if params.vocab is not None:
        lines.append("vocab=" + " ".join(params.vocab))
    for k, v in params.meta.items():
        if "\n" in str(v) or "=" in k:
            raise CheckpointError(f"metadata {k!r} cannot be stored in the header")
        lines.append(f"meta.{k}={v}")
    chunks, offset = [], 0
    for name, t in params.tensors.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        shape = ",".join(map(str, arr.shape))
        lines.append(f"param {name} {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    lines.append(f"payload_bytes={len(payload)}")
    lines.append(f"payload_crc32={zlib.crc32(payload):08x}")
    lines.append("END")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + payload)


def _parse_value(raw: str, typ):
    if typ is bool or typ == "bool":
        if raw not in ("True", "False"):
            raise CheckpointError(f"bad boolean {raw!r}")
        return raw == "True"
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def load_checkpoint(path, expected: Optional[ModelParams] = None, dtype=np.float64) -> ModelParams:
    """Read a checkpoint; with ``expected`` every name and shape must match it."""
    blob = Path(path).read_bytes()
    marker = b"\nEND\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or missing header terminator)")
    try:
        header = blob[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: header is not valid UTF-8") from None
    payload = blob[cut + len(marker):]

    types = {f.name: f.type for f in fields(ModelConfig)}
    cfg_vals, manifest, vocab, meta, meta_user = {}, [], None, {}, {}
    try:
        for line in header[1:]:
            if line.startswith("config."):
                key, raw = line[len("config."):].split("=", 1)
                if key not in types:
                    raise CheckpointError(f"unknown config key {key!r}")
                cfg_vals[key] = _parse_value(raw, types[key])
            elif line.startswith("meta."):
                key, raw = line[len("meta."):].split("=", 1)
                meta_user[key] = raw
            elif line.startswith("vocab="):
                vocab = line[len("vocab="):].split(" ")
            elif line.startswith("param "):
                _, name, shape, off = line.split(" ")
                manifest.append((name, tuple(int(s) for s in shape.split(",") if s), int(off)))
            elif line.startswith("payload_"):
                key, raw = line.split("=", 1)
                meta[key] = raw
            else:
                raise CheckpointError(f"unrecognised header line {line!r}")
        n_bytes = int(meta["payload_bytes"])
        crc = int(meta["payload_crc32"], 16)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: corrupted header: {e}") from None
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: corrupted header: {e}") from None
    if len(payload) != n_bytes or zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload size or checksum mismatch")
    if set(cfg_vals) != set(types):
        raise CheckpointError(f"{path}: config section incomplete")

    config = ModelConfig(**cfg_vals)
    tensors = {}
    for name, shape, off in manifest:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(payload):
            raise CheckpointError(f"{path}: parameter {name} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype, name=name)

    if expected is not None:
        want = {k: v.shape for k, v in expected.tensors.items()}
        got = {k: v.shape for k, v in tensors.items()}
        if want != got:
            diff = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
            raise CheckpointError(f"{path}: parameter names/shapes do not match the expected model: {diff[:5]}")
    return ModelParams(config, tensors, vocab, meta_user)
