"""Bit-exact binary checkpoints.

Layout, all integers little-endian:

    bytes 0..3    magic "ITTC"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 header length H
    bytes 16..    header: H bytes of UTF-8 JSON
    then          raw tensor payloads, little-endian, in manifest order

The header carries the flat run config, the payload dtype, and a tensor
manifest of {name, dtype, shape, offset, nbytes} with offsets relative to
the start of the payload region, non-overlapping and in order. An
optional optimizer section stores moment arrays the same way (appended to
the payload after the parameter tensors) plus the step counter.

Loading restores parameters bitwise and sets the global precision to the
stored dtype, so logits reproduce exactly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .config import TrainConfig, config_from_dict, config_to_dict
from .optim import AdamWState
from .tensor import Tensor, set_default_dtype

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"ITTC"
VERSION = 1

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Unreadable, corrupt or unsupported checkpoint content."""


def _manifest_and_payload(arrays: list[tuple[str, np.ndarray]], offset: int):
    manifest = []
    chunks = []
    for name, arr in arrays:
        tag = _DTYPE_TAGS[str(arr.dtype)]
        raw = np.ascontiguousarray(arr).astype(tag, copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    return manifest, chunks, offset


def save_checkpoint(
    path: str,
    cfg: TrainConfig,
    params: dict[str, Tensor],
    opt_state: AdamWState | None = None,
) -> None:
    param_arrays = [(name, t.data) for name, t in params.items()]
    manifest, chunks, offset = _manifest_and_payload(param_arrays, 0)
    header = {
        "format_version": VERSION,
        "config": config_to_dict(cfg),
        "dtype": str(next(iter(params.values())).data.dtype),
        "tensors": manifest,
        "optimizer": None,
    }
    if opt_state is not None:
        opt_arrays = [(f"m.{k}", v) for k, v in opt_state.m.items()]
        opt_arrays += [(f"v.{k}", v) for k, v in opt_state.v.items()]
        opt_manifest, opt_chunks, _ = _manifest_and_payload(opt_arrays, offset)
        header["optimizer"] = {"step": opt_state.step, "tensors": opt_manifest}
        chunks += opt_chunks
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(raw_header)))
        fh.write(raw_header)
        for chunk in chunks:
            fh.write(chunk)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes of {what}")
    return raw


def _validate_manifest(manifest, payload_size: int, what: str) -> None:
    prev_end = -1
    for entry in manifest:
        for key in ("name", "dtype", "shape", "offset", "nbytes"):
            if key not in entry:
                raise CheckpointError(f"{what} manifest entry missing {key!r}")
        if entry["dtype"] not in _DTYPE_TAGS:
            raise CheckpointError(f"{what} manifest: unsupported dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * np.dtype(
            _DTYPE_TAGS[entry["dtype"]]
        ).itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"{what} manifest: {entry['name']} byte length {nbytes} does not match shape"
            )
        if start <= prev_end:
            raise CheckpointError(
                f"{what} manifest: overlapping or out-of-order offset for {entry['name']}"
            )
        if start + nbytes > payload_size:
            raise CheckpointError(
                f"{what} manifest: {entry['name']} extends past end of file"
            )
        prev_end = start + nbytes - 1


def _extract(manifest, payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in manifest:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPE_TAGS[entry["dtype"]])
        out[entry["name"]] = np.ascontiguousarray(
            arr.astype(entry["dtype"], copy=False).reshape(entry["shape"])
        )
    return out


def load_checkpoint(
    path: str,
) -> tuple[TrainConfig, dict[str, Tensor], AdamWState | None]:
    """Read a checkpoint; sets the global precision to the stored dtype."""
    file_size = os.path.getsize(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        if 16 + header_len > file_size:
            raise CheckpointError(
                f"header length {header_len} exceeds file size {file_size}"
            )
        raw_header = _read_exact(fh, header_len, "header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"invalid header JSON: {exc}") from exc
        payload = fh.read()

    for key in ("config", "dtype", "tensors"):
        if key not in header:
            raise CheckpointError(f"header missing {key!r}")
    _validate_manifest(header["tensors"], len(payload), "parameter")
    set_default_dtype(header["dtype"])
    cfg = config_from_dict(header["config"])
    params = {
        name: Tensor(arr, requires_grad=True)
        for name, arr in _extract(header["tensors"], payload).items()
    }

    opt_state = None
    opt = header.get("optimizer")
    if opt is not None:
        _validate_manifest(opt["tensors"], len(payload), "optimizer")
        arrays = _extract(opt["tensors"], payload)
        m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}
        opt_state = AdamWState(m=m, v=v, step=int(opt["step"]))
    return cfg, params, opt_state
