import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from src.utils.errors import DataFormatError

logger = logging.getLogger(__name__)

MAGIC = b"OVLB1"
_U64 = struct.Struct("<Q")

NamedArrays = List[Tuple[str, np.ndarray]]


class ContainerFile:
    """
    Binary tensor container shared by model checkpoints and adversarial batches.

    Layout (all integers 64-bit little-endian unsigned):
        magic "OVLB1"
        header length, header bytes (UTF-8 JSON)
        per tensor: name length, name bytes, rank, dims..., raw float32 LE values
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def write(self, header: Dict[str, Any], tensors: NamedArrays) -> Path:
        """Write the header and tensors, replacing any existing file."""
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        chunks = [MAGIC, _U64.pack(len(header_bytes)), header_bytes]
        for name, array in tensors:
            name_bytes = name.encode("utf-8")
            values = np.ascontiguousarray(array, dtype="<f4")
            chunks.append(_U64.pack(len(name_bytes)))
            chunks.append(name_bytes)
            chunks.append(_U64.pack(values.ndim))
            chunks.extend(_U64.pack(dim) for dim in values.shape)
            chunks.append(values.tobytes())

        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_bytes(b"".join(chunks))
        logger.info(f"Wrote container {self.path} with {len(tensors)} tensors")
        return self.path

    def read(self) -> Tuple[Dict[str, Any], NamedArrays]:
        """Read back the header and the tensors in file order."""
        try:
            payload = self.path.read_bytes()
        except OSError as e:
            raise DataFormatError(f"Cannot read container {self.path}: {e}") from e

        if not payload.startswith(MAGIC):
            raise DataFormatError(f"{self.path}: bad magic, expected {MAGIC!r}")

        reader = _Reader(payload, len(MAGIC), self.path)
        header_bytes = reader.take(reader.u64())
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataFormatError(f"{self.path}: header is not valid UTF-8 JSON: {e}") from e

        tensors: NamedArrays = []
        while not reader.at_end():
            name = reader.take(reader.u64()).decode("utf-8")
            rank = reader.u64()
            shape = tuple(reader.u64() for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            values = np.frombuffer(reader.take(4 * count), dtype="<f4").astype(np.float32)
            tensors.append((name, values.reshape(shape)))
        return header, tensors


class _Reader:
    def __init__(self, payload: bytes, offset: int, path: Path):
        self.payload = payload
        self.offset = offset
        self.path = path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise DataFormatError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(_U64.size))[0]

    def at_end(self) -> bool:
        return self.offset >= len(self.payload)
