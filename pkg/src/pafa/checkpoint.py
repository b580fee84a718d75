"""
Model checkpoints: binary tensors plus a flat key=value model config.

Layout (little-endian):
    magic "PAFC", u32 version, u32 tensor count
    per tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
                prod(dims) float32 values, row-major

The config sits next to the binary as `<stem>.config.txt`. A checkpoint
without projection tensors loads as a stripped (inference-only) ParamSet.
"""

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .config import dump_flat_config, load_flat_config
from .errors import DataError
from .features import atomic_write_bytes
from .model import EncoderConfig, ParamSet, PROJECTION_KEYS

MAGIC = b"PAFC"
VERSION = 1
_U32 = struct.Struct("<I")


def config_path_for(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".config.txt")


def encode_params(params: ParamSet) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(params.tensors))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(tensor, dtype="<f4")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(data.ndim))
        parts.extend(_U32.pack(d) for d in data.shape)
        parts.append(data.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(data: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise DataError(f"{source}: truncated checkpoint")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    offset = 0
    if take(4) != MAGIC:
        raise DataError(f"{source}: not a PAFC checkpoint")
    (version,) = _U32.unpack(take(4))
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    (count,) = _U32.unpack(take(4))

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = _U32.unpack(take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = _U32.unpack(take(4))
        dims = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(take(4 * size), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float64)
    if offset != len(data):
        raise DataError(f"{source}: {len(data) - offset} trailing bytes")
    return tensors


def save_checkpoint(path: Union[str, Path], params: ParamSet) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_params(params))
    atomic_write_bytes(config_path_for(path), dump_flat_config(params.config.to_flat()).encode("utf-8"))
    return path


def load_checkpoint(path: Union[str, Path]) -> ParamSet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from e
    tensors = decode_tensors(data, str(path))
    config = EncoderConfig.from_flat(load_flat_config(config_path_for(path)))
    training = all(k in tensors for k in PROJECTION_KEYS)
    return ParamSet(config, tensors, training=training)


def quantize(params: ParamSet) -> ParamSet:
    """Round every tensor to float32 precision, as a checkpoint round-trip does."""
    tensors = {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}
    return ParamSet(params.config, tensors, params.training)
