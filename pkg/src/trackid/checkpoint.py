"""Named-parameter persistence.

Binary layout (all integers little-endian)::

    b"TIDC"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 payload

The architecture echo is kept next to the blob in ``<path>.cfg`` as flat
``key = value`` lines so the binary stays a pure tensor map.
"""
from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError

MAGIC = b"TIDC"
VERSION = 1


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    config: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_network(cls, net, config: dict | None = None) -> "Checkpoint":
        params = OrderedDict((k, np.array(v, dtype=np.float32)) for k, v in net.state_dict().items())
        return cls(params, dict(config or {}))


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 8:
        raise FormatError("checkpoint shorter than its header", kind="truncated")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", kind="magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", kind="version")
    pos = 8
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated at byte {pos}", kind="truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"parameter name is not UTF-8: {exc}", kind="header") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name}", kind="header")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        params[name] = arr
    return Checkpoint(params, {}, version)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike):
    with open(path, "wb") as fh:
        fh.write(encode(ckpt))
    if ckpt.config:
        with open(f"{os.fspath(path)}.cfg", "w") as fh:
            for k, v in ckpt.config.items():
                fh.write(f"{k} = {v}\n")


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    ckpt = decode(buf)
    cfg_path = f"{os.fspath(path)}.cfg"
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.split("=", 1)
                    ckpt.config[k.strip()] = v.strip()
    return ckpt


def load_into(net, ckpt: Checkpoint, strict: bool = True):
    """Copy every entry of ``ckpt`` into the matching parameter or buffer of ``net``."""
    targets = dict(net.named_parameters())
    buffers = {}
    for m_prefix, module in _modules_with_prefix(net):
        for k in module._buffers:
            buffers[m_prefix + k] = (module, k)
    missing = [n for n in list(targets) + list(buffers) if n not in ckpt.params]
    if strict and missing:
        raise FormatError(f"checkpoint lacks {missing[:3]}{'...' if len(missing) > 3 else ''}",
                          kind="mismatch")
    for name, arr in ckpt.params.items():
        if name in targets:
            p = targets[name]
            if p.shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}", axis=name)
            p.data = arr.astype(p.dtype).copy()
        elif name in buffers:
            module, k = buffers[name]
            if module._buffers[k].shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape}", axis=name)
            module._buffers[k] = arr.astype(module._buffers[k].dtype).copy()
        elif strict:
            raise FormatError(f"checkpoint entry {name} has no target", kind="mismatch")


def _modules_with_prefix(net, prefix: str = ""):
    yield prefix, net
    for name, child in net.children():
        yield from _modules_with_prefix(child, f"{prefix}{name}.")
