"""Checkpoint container: a text manifest plus one flat float32 blob.

Layout, byte-exact so other tooling can read or write it:

  <path>.manifest   UTF-8 text. First line "agglomerator-checkpoint v1".
                    Then one line per parameter, in blob order:
                        <name> <d0>x<d1>x... <byte_offset> <element_count>
                    Scalars use the dimension string "-".
  <path>.blob       Concatenated parameter values, little-endian float32,
                    C order, at the offsets the manifest declares.

Parameters are ordered by name (codepoint sort) so identical weights always
serialize to identical bytes. Values are stored as float32 regardless of the
in-memory precision; loading casts to the precision of the receiving model.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = "agglomerator-checkpoint v1"


class CheckpointError(RuntimeError):
    pass


def _dim_string(shape: tuple) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_dims(s: str) -> tuple:
    return () if s == "-" else tuple(int(d) for d in s.split("x"))


def serialize(params: dict[str, Tensor | np.ndarray]) -> tuple[str, bytes]:
    """Render (manifest text, blob bytes) for a named parameter set."""
    lines = [MAGIC]
    chunks = []
    offset = 0
    for name in sorted(params):
        value = params[name].value if isinstance(params[name], Tensor) else np.asarray(params[name])
        raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
        lines.append(f"{name} {_dim_string(value.shape)} {offset} {value.size}")
        chunks.append(raw)
        offset += len(raw)
    return "\n".join(lines) + "\n", b"".join(chunks)


def save(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    path = Path(path)
    manifest, blob = serialize(params)
    path.with_suffix(path.suffix + ".manifest").write_text(manifest)
    path.with_suffix(path.suffix + ".blob").write_bytes(blob)


def load(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float32 ndarray."""
    path = Path(path)
    mpath = path.with_suffix(path.suffix + ".manifest")
    bpath = path.with_suffix(path.suffix + ".blob")
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"checkpoint not found at {path} (.manifest/.blob pair)")
    lines = mpath.read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{mpath}: bad magic line {lines[:1]!r}")
    blob = bpath.read_bytes()
    out = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        try:
            name, dims, offset, count = ln.split()
            shape = _parse_dims(dims)
            offset, count = int(offset), int(count)
        except ValueError:
            raise CheckpointError(f"{mpath}: malformed manifest line {ln!r}") from None
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{mpath}: {name} extends past blob end ({end} > {len(blob)})")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[name] = arr.copy()
    return out


def blob_sha256(path: str | Path) -> str:
    path = Path(path)
    return hashlib.sha256(path.with_suffix(path.suffix + ".blob").read_bytes()).hexdigest()
