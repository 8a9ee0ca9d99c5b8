"""Versioned binary checkpoints (``.ddxc``).

Layout (little-endian)::

    b"DDXC" | u32 version=1 | u64 header_len | header JSON (UTF-8) | u32 tensor_count
    per tensor, sorted by name:
        u32 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | u8 width (4 or 8)
        | data (float32 or float64, row-major)

The header JSON holds ``config`` (the model config document), ``meta``, and
optionally ``optimizer`` hyper-parameters and ``has_norm``.  Parameters are
always stored at width 4; running statistics, normalization statistics and
optimizer moments keep their native width.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .data import NormStats
from .errors import ConfigError, CorruptionError, DDxError, FormatError, LengthError
from .model import DDxConfig, Model, build
from .optim import Optimizer

MAGIC = b"DDXC"
VERSION = 1


def _encode_tensor(name: str, arr: np.ndarray, width: int) -> bytes:
    raw_name = name.encode("utf-8")
    dtype = "<f4" if width == 4 else "<f8"
    parts = [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(struct.pack("<B", width))
    parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def encode_checkpoint(model: Model, optimizer: Optimizer | None = None,
                      norm: NormStats | None = None, meta: dict | None = None) -> bytes:
    tensors: dict[str, tuple[np.ndarray, int]] = {}

    def add(name, arr, width):
        if name in tensors:
            raise DDxError(f"internal error: tensor name collision {name!r}")
        tensors[name] = (arr, width)

    for name, p in model.params.items():
        add(name, p.data, 4)
    for site, (mean, var) in model.running.items():
        add(f"{site}.running_mean", mean, mean.dtype.itemsize)
        add(f"{site}.running_var", var, var.dtype.itemsize)
    if norm is not None:
        add("norm.mean", norm.mean, 8)
        add("norm.std", norm.std, 8)
    header = {"config": model.config.to_json(), "meta": meta or {}, "has_norm": norm is not None,
              "dtype": model.dtype.name}
    if optimizer is not None:
        header["optimizer"] = optimizer.hyper()
        for name, arr in optimizer.state_arrays().items():
            add(name, arr, arr.dtype.itemsize)
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header_raw)), header_raw,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr, width = tensors[name]
        parts.append(_encode_tensor(name, arr, width))
    return b"".join(parts)


def save_checkpoint(path, model: Model, optimizer: Optimizer | None = None,
                    norm: NormStats | None = None, meta: dict | None = None) -> None:
    """Write atomically: the bytes land in a sibling temp file that is then renamed."""
    blob = encode_checkpoint(model, optimizer, norm, meta)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".ddxc-", dir=directory)
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise LengthError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes):
    rd = _Reader(blob)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (header_len,) = rd.unpack("<Q", "header length")
    raw_header = rd.take(header_len, "header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from None
    try:
        config = DDxConfig.from_json(header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"checkpoint config invalid: {exc}") from None
    (count,) = rd.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = rd.unpack("<I", f"tensor {i} name length")
        name = rd.take(name_len, f"tensor {i} name").decode("utf-8")
        (rank,) = rd.unpack("<B", f"{name} rank")
        dims = rd.unpack(f"<{rank}I", f"{name} dims")
        (width,) = rd.unpack("<B", f"{name} width")
        if width not in (4, 8):
            raise CorruptionError(f"tensor {name!r} has invalid width {width}", name)
        n = int(np.prod(dims)) if rank else 1
        raw = rd.take(width * n, f"{name} data")
        arr = np.frombuffer(raw, dtype="<f4" if width == 4 else "<f8").reshape(dims)
        tensors[name] = arr
    if rd.pos != len(blob):
        raise FormatError(f"{len(blob) - rd.pos} trailing bytes after checkpoint tensors")
    return header, config, tensors


def load_checkpoint(path, dtype=None):
    """Returns ``(model, optimizer or None, norm or None, meta)``.

    Every tensor the config implies must be present with the implied shape;
    mismatches raise :class:`CorruptionError` naming the tensor.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    header, config, tensors = decode_checkpoint(blob)
    if dtype is None:
        dtype = header.get("dtype", "float32")
    dtype = np.dtype(dtype)
    model = build(config, seed=0, dtype=dtype)
    for name, shape in model.expected_shapes().items():
        if name not in tensors:
            raise CorruptionError(f"checkpoint is missing tensor {name!r}", name)
        if tensors[name].shape != shape:
            raise CorruptionError(
                f"tensor {name!r} has shape {tensors[name].shape}, config implies {shape}", name
            )
    for name, p in model.params.items():
        p.data[...] = tensors[name]
    for site in model.running:
        mean = tensors[f"{site}.running_mean"]
        var = tensors[f"{site}.running_var"]
        model.running[site] = (mean.astype(mean.dtype.newbyteorder("="), copy=True),
                               var.astype(var.dtype.newbyteorder("="), copy=True))
    known = set(model.expected_shapes())
    norm = None
    if header.get("has_norm"):
        for key in ("norm.mean", "norm.std"):
            if key not in tensors:
                raise CorruptionError(f"checkpoint is missing tensor {key!r}", key)
            if tensors[key].shape != (config.in_channels,):
                raise CorruptionError(f"tensor {key!r} has shape {tensors[key].shape}", key)
        norm = NormStats(tensors["norm.mean"].copy(), tensors["norm.std"].copy())
        known |= {"norm.mean", "norm.std"}
    optimizer = None
    if "optimizer" in header:
        opt_arrays = {}
        for name, arr in tensors.items():
            if name.startswith("optim."):
                param = name.split(".", 2)[2]
                if param not in model.params or arr.shape != model.params[param].shape:
                    raise CorruptionError(f"optimizer tensor {name!r} does not match the model", name)
                opt_arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
                known.add(name)
        optimizer = Optimizer.restore(header["optimizer"], opt_arrays)
    unknown = set(tensors) - known
    if unknown:
        raise CorruptionError(f"unexpected tensors {sorted(unknown)}", sorted(unknown)[0])
    return model, optimizer, norm, header.get("meta", {})
