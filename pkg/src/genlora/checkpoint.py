"""The ``GLRA`` tensor container.

Layout (all integers little-endian)::

    b"GLRA"                      magic
    u32      version             currently 1
    u64      metadata length     followed by that many bytes of UTF-8 JSON
    tensor blocks, in the order listed in metadata["tensors"]:
        u32  name length, then the UTF-8 name
        u8   dtype tag           1 = f64, 2 = f32
        u32  rank
        u64  dim, one per axis
        raw little-endian values, row-major

Adapter checkpoints store each adapter's blocks as ``<adapter>/<block>``
(e.g. ``layer0/theta_a.rbf``) with the hyper-parameters in
``metadata["adapters"]``. Weight files store plain named matrices.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .adapters import GenLoraState, LoraState
from .errors import FormatError
from .rbf import GeneratorParams, make_grid

MAGIC = b"GLRA"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
DTYPE_TAGS = {"f64": 1, "f32": 2}


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensors(tensors: dict, metadata: dict | None = None, dtype: str = "f64") -> bytes:
    if dtype not in DTYPE_TAGS:
        raise ValueError(f"dtype must be one of {sorted(DTYPE_TAGS)}")
    tag = DTYPE_TAGS[dtype]
    meta = dict(metadata or {})
    meta["tensors"] = list(tensors)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta_bytes)), meta_bytes]
    for name, arr in tensors.items():
        arr = np.require(arr, dtype=DTYPES[tag], requirements="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_tensors(path, tensors: dict, metadata: dict | None = None, dtype: str = "f64") -> None:
    atomic_write_bytes(path, encode_tensors(tensors, metadata, dtype))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"file truncated at byte {self.pos} (needed {n} more bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes):
    """Parse a GLRA byte string into ``(metadata, tensors)``; tensors are float64 copies."""
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise FormatError("bad magic: not a GLRA file")
    version, meta_len = rd.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"unsupported GLRA version {version}")
    try:
        meta = json.loads(rd.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}") from None
    names = meta.get("tensors")
    if not isinstance(names, list):
        raise FormatError("metadata lacks the tensor list")
    tensors = {}
    for expected in names:
        (name_len,) = rd.unpack("<I")
        name = rd.take(name_len).decode("utf-8", errors="replace")
        if name != expected:
            raise FormatError(f"tensor {name!r} found where {expected!r} was declared")
        tag, rank = rd.unpack("<BI")
        if tag not in DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for tensor {name!r}")
        shape = rd.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = rd.take(count * DTYPES[tag].itemsize)
        tensors[name] = np.frombuffer(raw, dtype=DTYPES[tag]).reshape(shape).astype(np.float64)
    if rd.pos != len(data):
        raise FormatError(f"{len(data) - rd.pos} trailing bytes after the last tensor")
    return meta, tensors


def load_tensors(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return decode_tensors(data)


# --- adapter checkpoints ---------------------------------------------------------


def adapter_metadata(state) -> dict:
    if state.kind == "genlora":
        return {
            "kind": "genlora", "m": state.m, "n": state.n, "rank": state.rank,
            "groups": state.groups, "centers": state.grid.k_centers,
            "grid": [state.grid.lo, state.grid.hi], "epsilon": state.epsilon,
            "scale": state.scale, "normalize": state.normalize, "frozen": sorted(state.frozen),
        }
    return {"kind": "lora", "m": state.m, "n": state.n, "rank": state.rank,
            "alpha": state.alpha, "scale": state.scale, "frozen": sorted(state.frozen)}


def save_checkpoint(path, adapters: dict, extra: dict | None = None, dtype: str = "f64") -> None:
    """Write named adapter states (``{name: state}``) to a GLRA checkpoint."""
    meta = {"format": "adapters", "adapters": {}}
    meta.update(extra or {})
    tensors = {}
    for name, state in adapters.items():
        meta["adapters"][name] = adapter_metadata(state)
        for block, arr in state.blocks().items():
            tensors[f"{name}/{block}"] = arr
    save_tensors(path, tensors, meta, dtype)


def _state_from(name: str, info: dict, tensors: dict):
    def get(block, shape):
        key = f"{name}/{block}"
        if key not in tensors:
            raise FormatError(f"checkpoint lacks tensor {key!r}")
        arr = tensors[key]
        if arr.shape != shape:
            raise FormatError(f"tensor {key!r} has shape {arr.shape}, metadata implies {shape}")
        return arr.copy()

    try:
        m, n, r = int(info["m"]), int(info["n"]), int(info["rank"])
        if info["kind"] == "genlora":
            g, k = int(info["groups"]), int(info["centers"])
            return GenLoraState(
                m, n, r, g, make_grid(k, *info["grid"]),
                z_b=get("z_b", (m,)), z_a=get("z_a", (n,)),
                theta_b=GeneratorParams(get("theta_b.rbf", (r, g, k)), get("theta_b.base", (r, g))),
                theta_a=GeneratorParams(get("theta_a.rbf", (r, g, k)), get("theta_a.base", (r, g))),
                epsilon=float(info["epsilon"]), scale=float(info["scale"]),
                normalize=bool(info["normalize"]), frozen=frozenset(info["frozen"]),
            )
        if info["kind"] == "lora":
            return LoraState(get("b", (m, r)), get("a", (r, n)), float(info["alpha"]),
                             frozenset(info["frozen"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"adapter {name!r}: bad metadata ({exc})") from None
    raise FormatError(f"adapter {name!r}: unknown kind {info.get('kind')!r}")


def load_checkpoint(path):
    """Return ``({name: state}, metadata)`` from an adapter checkpoint."""
    meta, tensors = load_tensors(path)
    if meta.get("format") != "adapters" or not isinstance(meta.get("adapters"), dict):
        raise FormatError(f"{path} is not an adapter checkpoint")
    states = {name: _state_from(name, info, tensors) for name, info in meta["adapters"].items()}
    return states, meta
