"""Named-tensor checkpoint container.

Layout (little-endian): magic "UCKP", version u32, tensor count u32, then per
tensor: name length u16, UTF-8 name, dtype code u8 (0 = float32), rank u8,
dims u32 each, raw payload; a CRC32 of everything before it closes the file.
Save -> load is bitwise exact and the CRC is validated on load.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_MAGIC = b"UCKP"
_VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f4").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch; file corrupt")
    version, count = struct.unpack_from("<II", body, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        dtype_code, rank = struct.unpack_from("<BB", body, off)
        off += 2
        if dtype_code != _DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{rank}I", body, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, "<f4", n, off).reshape(dims)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return out


def pack_model(model, ema_shadow: list[np.ndarray] | None = None,
               extras: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Flatten a Module into container tensors: raw/<name>, ema/<name>, extra/<k>."""
    out = {}
    named = model.named_parameters()
    for name, p in named:
        out[f"raw/{name}"] = p.data
    if ema_shadow is not None:
        if len(ema_shadow) != len(named):
            raise ValueError("pack_model: EMA shadow does not match parameters")
        for (name, _), shadow in zip(named, ema_shadow):
            out[f"ema/{name}"] = shadow
    for k, v in (extras or {}).items():
        out[f"extra/{k}"] = np.asarray(v, np.float32)
    return out


def unpack_model(model, tensors: dict[str, np.ndarray], use_ema: bool = True) -> dict[str, np.ndarray]:
    """Load weights into a freshly built Module; returns the extra/* arrays."""
    prefix = "ema/" if use_ema and any(k.startswith("ema/") for k in tensors) else "raw/"
    state = {
        k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)
    }
    model.load_state(state)
    return {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
