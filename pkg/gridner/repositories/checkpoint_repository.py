"""
Checkpoint Repository
Binary persistence of named parameter tensors.

Byte layout (all integers little-endian):

    magic        8 bytes   b"GRIDNER1"
    header_len   uint32
    header       header_len bytes of UTF-8 JSON
    repeated header["n_params"] times:
        name_len uint32
        name     name_len bytes of UTF-8
        count    uint64    number of elements
        payload  count * itemsize bytes, raw floats at header["dtype"] width
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from gridner.core.config import settings
from gridner.core.exceptions import CheckpointError
from gridner.utils.logger import get_logger


logger = get_logger("checkpoint")

_DTYPES = {"float64": np.dtype("<f8"), "float32": np.dtype("<f4")}


class CheckpointRepository:
    """Reads and writes checkpoint files in the GRIDNER1 layout."""

    def __init__(self):
        self.magic = settings.CHECKPOINT_MAGIC.encode("ascii")
        self.version = settings.CHECKPOINT_VERSION

    def save(self, path: Path, header: dict, tensors: Dict[str, np.ndarray], precision: str) -> Path:
        """
        Write a checkpoint.

        Args:
            path: Output file
            header: JSON-serializable metadata (config echo, vocab, step, metric)
            tensors: Ordered parameter name -> array
            precision: "float64" or "float32"

        Returns:
            Path: Written file
        """
        dtype = _DTYPES[precision]
        full_header = dict(header)
        full_header.update({
            "version": self.version,
            "dtype": precision,
            "n_params": len(tensors),
            "shapes": {name: list(array.shape) for name, array in tensors.items()},
        })
        header_bytes = json.dumps(full_header, ensure_ascii=False, sort_keys=True).encode("utf-8")

        chunks = [self.magic, struct.pack("<I", len(header_bytes)), header_bytes]
        for name, array in tensors.items():
            name_bytes = name.encode("utf-8")
            payload = np.ascontiguousarray(array, dtype=dtype).tobytes()
            chunks += [struct.pack("<I", len(name_bytes)), name_bytes, struct.pack("<Q", array.size), payload]

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(b"".join(chunks))
        tmp.replace(path)
        logger.info(f"Saved checkpoint {path} ({len(tensors)} tensors, {precision})")
        return path

    def load(self, path: Path) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
        """
        Read a checkpoint completely before returning anything.

        Args:
            path: Checkpoint file

        Returns:
            Tuple of (header, ordered name -> array reshaped to the recorded shape)

        Raises:
            CheckpointError: On bad magic, version mismatch, truncation or trailing bytes
        """
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"Checkpoint not found: {path}")
        blob = path.read_bytes()
        reader = _Reader(blob, path)

        if reader.take(len(self.magic)) != self.magic:
            raise CheckpointError(f"{path} is not a {self.magic.decode()} checkpoint")
        (header_len,) = struct.unpack("<I", reader.take(4))
        try:
            header = json.loads(reader.take(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"Corrupt checkpoint header in {path}") from exc

        if header.get("version") != self.version:
            raise CheckpointError(
                f"Checkpoint version {header.get('version')} does not match supported version {self.version}"
            )
        dtype = _DTYPES.get(header.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"Unknown checkpoint dtype {header.get('dtype')!r}")

        shapes = header.get("shapes", {})
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(int(header.get("n_params", 0))):
            (name_len,) = struct.unpack("<I", reader.take(4))
            name = reader.take(name_len).decode("utf-8")
            (count,) = struct.unpack("<Q", reader.take(8))
            array = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).copy()
            shape = tuple(shapes.get(name, (count,)))
            if int(np.prod(shape)) != count:
                raise CheckpointError(f"Tensor '{name}' has {count} elements but header shape {list(shape)}")
            tensors[name] = array.reshape(shape)

        if not reader.exhausted:
            raise CheckpointError(f"Unexpected trailing bytes in {path}")
        return header, tensors


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"Checkpoint {self.path} is truncated")
        chunk = self.blob[self.pos: self.pos + n]
        self.pos += n
        return chunk

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.blob)
