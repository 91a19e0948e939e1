"""VLRD checkpoint container and its human-readable sidecar.

Layout (little endian)::

    b"VLRD" | u32 version | u32 n | ModelConfig JSON (n bytes)
           | u32 m | metadata JSON (m bytes) | u32 count
           | count x (u16 name_len | name | u8 dtype | u8 ndim | u32 x ndim shape
                      | u64 nbytes | raw data)
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Mapping, NamedTuple, Optional, Union

import numpy as np
import torch
from pydantic import ValidationError

from .errors import CheckpointError, ConfigMismatch, VersionMismatch
from .models import ModelConfig
from .network import VLReader

logger = logging.getLogger(__name__)

MAGIC = b"VLRD"
FORMAT_VERSION = 1
SIDECAR_SUFFIX = ".params.txt"

_DTYPES = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "u1"),
    4: (torch.bool, "?"),
    5: (torch.int32, "<i4"),
}
_CODES = {torch_dtype: code for code, (torch_dtype, _) in _DTYPES.items()}


class Checkpoint(NamedTuple):
    """Config, named tensors and metadata read from one file."""
    config: ModelConfig
    tensors: Dict[str, torch.Tensor]
    metadata: Dict[str, Any]


def sidecar_path(path: Union[str, Path]) -> Path:
    """Path of the readable parameter listing next to a checkpoint."""
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def _write_block(f: BinaryIO, payload: bytes) -> None:
    """Length-prefixed byte block."""
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    """Exactly n bytes or CheckpointError on truncation."""
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("Checkpoint is truncated")
    return data


def _read_block(f: BinaryIO) -> bytes:
    """Inverse of _write_block."""
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n)


def save_checkpoint(
    path: Union[str, Path],
    config: ModelConfig,
    tensors: Mapping[str, torch.Tensor],
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write tensors with their config and metadata; returns the checkpoint path."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            _write_block(f, config.model_dump_json().encode("utf-8"))
            _write_block(f, json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8"))
            f.write(struct.pack("<I", len(tensors)))
            for name, tensor in tensors.items():
                tensor = tensor.detach().cpu()
                if tensor.dtype not in _CODES:
                    raise CheckpointError(f"Unsupported dtype {tensor.dtype} for {name}")
                code = _CODES[tensor.dtype]
                data = np.ascontiguousarray(tensor.numpy().astype(_DTYPES[code][1])).tobytes()
                encoded = name.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<BB", code, tensor.dim()))
                f.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
                f.write(struct.pack("<Q", len(data)))
                f.write(data)
        write_sidecar(path, config, tensors)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")
    return path


def write_sidecar(path: Path, config: ModelConfig, tensors: Mapping[str, torch.Tensor]) -> None:
    """One line per tensor: name, dtype and shape."""
    lines = [f"# {MAGIC.decode()} v{FORMAT_VERSION}", f"# config {config.model_dump_json()}"]
    for name, tensor in tensors.items():
        shape = "x".join(str(s) for s in tensor.shape) or "scalar"
        lines.append(f"{name}\t{str(tensor.dtype).replace('torch.', '')}\t{shape}")
    sidecar_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_differences(a: ModelConfig, b: ModelConfig) -> List[str]:
    """Names of fields whose values differ."""
    return [name for name in ModelConfig.model_fields if getattr(a, name) != getattr(b, name)]


def load_checkpoint(
    path: Union[str, Path], expected: Optional[ModelConfig] = None
) -> Checkpoint:
    """Read a checkpoint; with ``expected`` the stored config must match it exactly."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise CheckpointError(f"{path} is not a VLRD checkpoint")
            (version,) = struct.unpack("<I", _read_exact(f, 4))
            if version != FORMAT_VERSION:
                raise VersionMismatch(version, FORMAT_VERSION)
            try:
                config = ModelConfig.model_validate_json(_read_block(f))
                metadata = json.loads(_read_block(f))
            except (ValidationError, ValueError) as e:
                raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}") from e

            (count,) = struct.unpack("<I", _read_exact(f, 4))
            tensors: Dict[str, torch.Tensor] = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", _read_exact(f, 2))
                name = _read_exact(f, name_len).decode("utf-8")
                code, ndim = struct.unpack("<BB", _read_exact(f, 2))
                if code not in _DTYPES:
                    raise CheckpointError(f"Unknown dtype code {code} for {name}")
                shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
                (nbytes,) = struct.unpack("<Q", _read_exact(f, 8))
                torch_dtype, np_dtype = _DTYPES[code]
                array = np.frombuffer(_read_exact(f, nbytes), dtype=np_dtype).reshape(shape)
                tensors[name] = torch.from_numpy(array.copy()).to(torch_dtype)
    except OSError as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e

    if expected is not None:
        differences = config_differences(config, expected)
        if differences:
            raise ConfigMismatch(differences)
    logger.debug(f"Loaded {len(tensors)} tensors from {path}")
    return Checkpoint(config=config, tensors=tensors, metadata=metadata)


def model_from_checkpoint(ckpt: Checkpoint, device: str = "cpu") -> VLReader:
    """Rebuild the network from the ``model.*`` tensors of a checkpoint."""
    weights = {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    if not weights:
        raise CheckpointError("Checkpoint holds no model parameters")
    # parameters come back in the precision they were saved in
    model = VLReader(ckpt.config).to(next(iter(weights.values())).dtype)
    model.load_state_dict(weights)
    return model.to(device)
