"""
VoiceShield Model Store
Binary container for model parameters and optimizer state: magic `CRNV`,
format version, output count and a list of named float32 tensors, closed by a
CRC32 of everything before it. All integers are little-endian.
"""

import struct
import logging
import zlib
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from artifacts import atomic_write
from crn import HEADS, CrnModel
from errors import BadMagic, ChecksumMismatch, IoError, VersionMismatch

logger = logging.getLogger(__name__)

MAGIC = b'CRNV'
FORMAT_VERSION = 1
HEADS_TENSOR = 'meta.heads'

_HEADER = struct.Struct('<4sIII')
_CRC = struct.Struct('<I')


def encode_tensors(tensors: Dict[str, np.ndarray], n_out: int) -> bytes:
    """Serialize named tensors; values are stored as 32-bit floats in row-major order."""
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, n_out, len(tensors))]
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype='<f4')
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<B', data.ndim))
        parts.append(struct.pack(f'<{data.ndim}I', *data.shape))
        parts.append(data.tobytes())
    body = b''.join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_tensors(blob: bytes) -> Tuple[int, Dict[str, np.ndarray]]:
    """
    Parse a container.

    Checks run in order magic, checksum, version, so a truncated file is
    reported as a checksum failure rather than a parse error.
    """
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise BadMagic("Not a CRNV container")
    if len(blob) < _HEADER.size + _CRC.size:
        raise ChecksumMismatch("Container is truncated")
    body, (stored_crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch("Container checksum does not match")

    _, version, n_out, count = _HEADER.unpack_from(body, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"Container version {version}, expected {FORMAT_VERSION}")

    tensors: Dict[str, np.ndarray] = {}
    offset = _HEADER.size
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<B', body, offset)
            offset += 1
            shape = struct.unpack_from(f'<{rank}I', body, offset)
            offset += 4 * rank
            size = int(np.prod(shape))
            data = np.frombuffer(body, dtype='<f4', count=size, offset=offset)
            offset += 4 * size
            tensors[name] = data.reshape(shape).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise IoError(f"Malformed container: {e}")
    if offset != len(body):
        raise IoError(f"Malformed container: {len(body) - offset} trailing bytes")
    return n_out, tensors


def write_container(tensors: Dict[str, np.ndarray], n_out: int, path: Union[str, Path]):
    blob = encode_tensors(tensors, n_out)
    with atomic_write(path) as tmp:
        tmp.write_bytes(blob)


def read_container(path: Union[str, Path]) -> Tuple[int, Dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}")
    return decode_tensors(blob)


def save_model(model: CrnModel, path: Union[str, Path]):
    """Write model parameters and head layout; float64 models are stored at 32-bit."""
    tensors = dict(model.params)
    tensors[HEADS_TENSOR] = np.array([HEADS.index(h) for h in model.heads], dtype=np.float32)
    write_container(tensors, model.n_out, path)
    logger.info(f"Saved model ({model.parameter_count()} parameters, heads {model.heads}) to {path}")


def load_model(path: Union[str, Path]) -> CrnModel:
    n_out, tensors = read_container(path)
    codes = tensors.pop(HEADS_TENSOR, None)
    if codes is None:
        raise IoError(f"{path} holds no head layout; not a model file")
    if np.any((codes < 0) | (codes >= len(HEADS))):
        raise IoError(f"{path} holds an unknown head code {codes.tolist()}")
    heads = tuple(HEADS[int(c)] for c in codes)
    model = CrnModel(tensors, heads)
    if model.n_out != n_out:
        raise IoError(f"{path} declares {n_out} outputs but stores {model.n_out}")
    logger.info(f"Loaded model with heads {heads} from {path}")
    return model


def save_optimizer_state(state: Dict[str, np.ndarray], n_out: int, path: Union[str, Path]):
    """Optimizer sidecar file, same container as the model."""
    write_container(state, n_out, path)


def load_optimizer_state(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    _, state = read_container(path)
    return state
