"""
CKWT weight container

Little-endian layout:
    b"CKWT", version u32,
    then per parameter until end of file:
        name length u32, UTF-8 name, rank u32, dims u32[rank], float64 payload (row-major)
"""

import logging
import struct
from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np

from services.errors import CheckpointError
from services.tools.io_tools import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"CKWT"
VERSION = 1


def encode_container(named_arrays: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    chunks = [MAGIC, struct.pack('<I', VERSION)]
    for name, array in named_arrays:
        array = np.ascontiguousarray(array, dtype='<f8')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(array.tobytes(order='C'))
    return b"".join(chunks)


def decode_container(payload: bytes, source: str = "<bytes>") -> List[Tuple[str, np.ndarray]]:
    if len(payload) < 8 or payload[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a CKWT container (bad magic)")
    (version,) = struct.unpack_from('<I', payload, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported CKWT version {version}")

    records = []
    offset = 8
    while offset < len(payload):
        try:
            (name_length,) = struct.unpack_from('<I', payload, offset)
            offset += 4
            name = payload[offset:offset + name_length].decode('utf-8')
            if len(name.encode('utf-8')) != name_length:
                raise CheckpointError(f"{source}: truncated parameter name")
            offset += name_length
            (rank,) = struct.unpack_from('<I', payload, offset)
            offset += 4
            dims = struct.unpack_from(f'<{rank}I', payload, offset)
            offset += 4 * rank
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{source}: corrupt record header at byte {offset}: {e}")

        count = int(np.prod(dims)) if rank else 1
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{source}: payload of '{name}' truncated")
        array = np.frombuffer(payload[offset:end], dtype='<f8').astype(np.float64).reshape(dims)
        records.append((name, array))
        offset = end
    return records


def write_container(path, named_arrays: Iterable[Tuple[str, np.ndarray]]) -> Path:
    path = atomic_write_bytes(path, encode_container(named_arrays))
    logger.info("💾 CHECKPOINT: wrote %s", path)
    return path


def read_container(path) -> List[Tuple[str, np.ndarray]]:
    path = Path(path)
    return decode_container(path.read_bytes(), source=str(path))
