"""Checkpoint directory: text manifest + one little-endian binary blob.

Layout of ``<dir>/manifest.txt``::

    format=bevocc-checkpoint
    version=1
    blob=params.bin
    blob_sha256=<hex>
    meta.<key>=<value>            (any number, free-form run metadata)
    tensor name=<path> shape=<d0,d1,...> dtype=<f4 offset=<bytes> nbytes=<bytes>

Tensors are stored back to back in ``params.bin`` in manifest order.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np

FORMAT = "bevocc-checkpoint"
VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "params.bin"


class CheckpointError(IOError):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, object] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format={FORMAT}", f"version={VERSION}", f"blob={BLOB}"]
    chunks, records, offset = [], [], 0
    for name, arr in arrays.items():
        if any(ch in name for ch in " \n="):
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        records.append(f"tensor name={name} shape={shape} dtype={le.dtype.str} offset={offset} nbytes={len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    lines.append(f"blob_sha256={hashlib.sha256(blob).hexdigest()}")
    for key, val in (meta or {}).items():
        sval = str(val)
        if "\n" in sval:
            raise CheckpointError(f"meta value for {key!r} contains a newline")
        lines.append(f"meta.{key}={sval}")
    lines.extend(records)
    _atomic_write(path / BLOB, blob)
    _atomic_write(path / MANIFEST, ("\n".join(lines) + "\n").encode())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text()
        blob = (path / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    head, meta, arrays = {}, {}, {}
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("tensor "):
            fields = dict(item.split("=", 1) for item in line[len("tensor "):].split(" "))
            shape = tuple(int(d) for d in fields["shape"].split(",") if d)
            off, nbytes = int(fields["offset"]), int(fields["nbytes"])
            if off + nbytes > len(blob):
                raise CheckpointError(f"blob truncated: tensor {fields['name']} needs bytes "
                                      f"[{off}, {off + nbytes}) but blob has {len(blob)}")
            arr = np.frombuffer(blob, dtype=np.dtype(fields["dtype"]), count=nbytes // np.dtype(fields["dtype"]).itemsize,
                                offset=off)
            arrays[fields["name"]] = arr.reshape(shape).copy()
        elif line.startswith("meta."):
            key, val = line[len("meta."):].split("=", 1)
            meta[key] = val
        else:
            key, val = line.split("=", 1)
            head[key] = val
    if head.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint (format={head.get('format')!r})")
    if int(head.get("version", -1)) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {head.get('version')}")
    if head.get("blob_sha256") != hashlib.sha256(blob).hexdigest():
        raise CheckpointError(f"{path}: blob checksum mismatch")
    return arrays, meta
