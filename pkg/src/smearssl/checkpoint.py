"""Binary checkpoint container.

Layout, all integers little-endian:

    magic   4 bytes  b"RDCK"
    version u16      currently 1
    config  u32 byte length, then UTF-8 "key=value" lines (one per field)
    count   u32      number of parameter blobs
    blob    u16 name length + UTF-8 name
            u8 ndim, then ndim * u32 extents
            float32 row-major data

float32 payloads round-trip bit-exactly. The same container stores both the
exported teacher encoder (config + encoder params) and the full training
state (params plus optimizer moments and counters under prefixed names).
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import InputError
from .vit import VitConfig

MAGIC = b"RDCK"
VERSION = 1

_CONFIG_FIELDS = ("image_size", "patch_size", "embed_dim", "depth", "heads",
                  "mlp_ratio", "in_channels")


def _encode_config(cfg: VitConfig) -> bytes:
    lines = []
    for f in _CONFIG_FIELDS:
        v = getattr(cfg, f)
        lines.append(f"{f}={v!r}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_config(raw: bytes) -> VitConfig:
    kv = {}
    for line in raw.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    missing = [f for f in _CONFIG_FIELDS if f not in kv]
    if missing:
        raise InputError(f"checkpoint config missing fields: {missing}")
    return VitConfig(
        image_size=int(kv["image_size"]),
        patch_size=int(kv["patch_size"]),
        embed_dim=int(kv["embed_dim"]),
        depth=int(kv["depth"]),
        heads=int(kv["heads"]),
        mlp_ratio=float(kv["mlp_ratio"]),
        in_channels=int(kv["in_channels"]),
    )


def write_checkpoint(path: str, cfg: VitConfig, params: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    cfg_bytes = _encode_config(cfg)
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name in params:  # insertion order; writers keep it deterministic
        arr = np.ascontiguousarray(params[name], dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise InputError(f"parameter name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for ext in arr.shape:
            buf.write(struct.pack("<I", ext))
        buf.write(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path: str) -> tuple[VitConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint file (bad magic {raw[:4]!r})")
    off = 4
    (version,) = struct.unpack_from("<H", view, off)
    off += 2
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", view, off)
    off += 4
    cfg = _decode_config(bytes(view[off:off + cfg_len]))
    off += cfg_len
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nlen]).decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = 4 * size
        if off + nbytes > len(raw):
            raise InputError(f"{path}: truncated blob {name!r}")
        arr = np.frombuffer(view[off:off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
        params[name] = arr
    if off != len(raw):
        raise InputError(f"{path}: {len(raw) - off} trailing bytes after last blob")
    return cfg, params
