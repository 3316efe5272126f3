"""
Binary checkpoint container shared by the GAN and classifier stages

Layout, all integers little-endian:

    magic            8 bytes  b"GANAUGCK"
    version          u32
    metadata length  u64, followed by UTF-8 JSON
    tensor count     u32
    per tensor:      u16 name length, name
                     u8 dtype length, numpy dtype string ("<f4", "|u1", ...)
                     u8 ndim, ndim x u64 shape
                     u64 byte length, raw bytes
"""
import io
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Tuple, Union

import numpy as np
import torch

from utils.errors import CheckpointError
from version import __checkpoint_format__

MAGIC = b"GANAUGCK"
FORMAT_VERSION = __checkpoint_format__

TensorTable = Dict[str, np.ndarray]


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def to_numpy(tensor: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        return tensor.detach().cpu().contiguous().numpy().copy()
    return np.asarray(tensor)


def write_container(path: Union[str, Path], tensors: TensorTable, meta: Dict[str, Any]) -> Path:
    """Write tensors + metadata to `path` (written to a temp file, then renamed)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<I", FORMAT_VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buffer.write(struct.pack("<Q", len(meta_bytes)))
    buffer.write(meta_bytes)
    buffer.write(struct.pack("<I", len(tensors)))

    for name, value in tensors.items():
        array = _little_endian(to_numpy(value))
        name_bytes = name.encode("utf-8")
        dtype_bytes = array.dtype.str.encode("ascii")
        raw = array.tobytes(order="C")
        buffer.write(struct.pack("<H", len(name_bytes)))
        buffer.write(name_bytes)
        buffer.write(struct.pack("<B", len(dtype_bytes)))
        buffer.write(dtype_bytes)
        buffer.write(struct.pack("<B", array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        buffer.write(struct.pack("<Q", len(raw)))
        buffer.write(raw)

    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_bytes(buffer.getvalue())
    tmp_path.replace(path)
    return path


def _read_exact(stream: BinaryIO, size: int, what: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointError(f"Truncated checkpoint while reading {what}")
    return data


def read_container(path: Union[str, Path]) -> Tuple[TensorTable, Dict[str, Any]]:
    """Read a container written by `write_container`"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")

    with path.open("rb") as stream:
        magic = stream.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"{path} is not a ganaug checkpoint (bad magic header, expected format version {FORMAT_VERSION})"
            )
        (version,) = struct.unpack("<I", _read_exact(stream, 4, "format version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")

        (meta_len,) = struct.unpack("<Q", _read_exact(stream, 8, "metadata length"))
        try:
            meta = json.loads(_read_exact(stream, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Corrupt checkpoint metadata: {e}") from e

        (count,) = struct.unpack("<I", _read_exact(stream, 4, "tensor count"))
        tensors: TensorTable = {}
        for index in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(stream, 2, f"tensor {index} name length"))
            name = _read_exact(stream, name_len, f"tensor {index} name").decode("utf-8")
            (dtype_len,) = struct.unpack("<B", _read_exact(stream, 1, f"{name} dtype length"))
            dtype = np.dtype(_read_exact(stream, dtype_len, f"{name} dtype").decode("ascii"))
            (ndim,) = struct.unpack("<B", _read_exact(stream, 1, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(stream, 8 * ndim, f"{name} shape"))
            (nbytes,) = struct.unpack("<Q", _read_exact(stream, 8, f"{name} byte length"))
            expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if nbytes != expected:
                raise CheckpointError(f"Tensor {name}: {nbytes} bytes stored, shape {shape} needs {expected}")
            raw = _read_exact(stream, nbytes, f"{name} data")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

        if stream.read(1):
            raise CheckpointError(f"Trailing bytes after the last tensor in {path}")

    return tensors, meta


def require_kind(meta: Dict[str, Any], kind: str, path: Union[str, Path]):
    found = meta.get("kind")
    if found != kind:
        raise CheckpointError(f"{path} holds a '{found}' checkpoint, expected '{kind}'")


def module_tensors(prefix: str, module: torch.nn.Module) -> TensorTable:
    """Flatten a module's state_dict under `prefix.`"""
    return {f"{prefix}.{key}": to_numpy(value) for key, value in module.state_dict().items()}


def load_module_tensors(prefix: str, module: torch.nn.Module, tensors: TensorTable, strict: bool = True):
    marker = f"{prefix}."
    state = {key[len(marker):]: torch.from_numpy(value.copy())
             for key, value in tensors.items() if key.startswith(marker)}
    try:
        module.load_state_dict(state, strict=strict)
    except RuntimeError as e:
        raise CheckpointError(f"Parameters under '{prefix}' do not fit the network: {e}") from e


def optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer) -> Tuple[TensorTable, Dict[str, Any]]:
    """Split an optimizer state_dict into tensors and JSON-able param groups"""
    state_dict = optimizer.state_dict()
    tensors: TensorTable = {}
    for param_id, slots in state_dict["state"].items():
        for slot, value in slots.items():
            tensors[f"{prefix}.state.{param_id}.{slot}"] = to_numpy(torch.as_tensor(value))
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()}
              for group in state_dict["param_groups"]]
    return tensors, {"param_groups": groups}


def load_optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer,
                           tensors: TensorTable, meta: Dict[str, Any]):
    marker = f"{prefix}.state."
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, value in tensors.items():
        if not key.startswith(marker):
            continue
        param_id, slot = key[len(marker):].split(".", 1)
        state.setdefault(int(param_id), {})[slot] = torch.from_numpy(value.copy())
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in group.items()}
              for group in meta["param_groups"]]
    optimizer.load_state_dict({"state": state, "param_groups": groups})
