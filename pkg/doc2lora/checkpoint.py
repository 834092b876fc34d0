"""Single-file tensor container used for adapters, model and hypernetwork checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"D2LA" adapters, b"D2LM" target LM, b"D2HN" hypernetwork, b"D2TS" training state
    version    uint16
    header_len uint32
    header     JSON, utf-8: {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    payload    raw little-endian tensor bytes, offsets relative to payload start
    crc32      uint32 over every preceding byte

See docs/file-formats.md for the per-kind meta fields.
"""

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple, Union

import numpy as np
import torch

from .errors import AdapterFormatError, ChecksumError, UnknownVersionError

FORMAT_VERSION = 1

_PREFIX = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")

# torch dtype -> (header name, numpy little-endian dtype of the stored bytes)
_DTYPES = {
    torch.float32: ("float32", "<f4"),
    torch.float64: ("float64", "<f8"),
    torch.float16: ("float16", "<f2"),
    torch.bfloat16: ("bfloat16", "<i2"),
    torch.int64: ("int64", "<i8"),
    torch.int32: ("int32", "<i4"),
    torch.uint8: ("uint8", "u1"),
    torch.bool: ("bool", "u1"),
}
_BY_NAME = {name: (dtype, np_dtype) for dtype, (name, np_dtype) in _DTYPES.items()}


def _tensor_bytes(t: torch.Tensor) -> Tuple[str, bytes]:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise AdapterFormatError(f"unsupported dtype {t.dtype}")
    name, np_dtype = _DTYPES[t.dtype]
    if t.dtype == torch.bfloat16:
        arr = t.view(torch.int16).numpy()
    elif t.dtype == torch.bool:
        arr = t.to(torch.uint8).numpy()
    else:
        arr = t.numpy()
    return name, arr.astype(np_dtype, copy=False).tobytes()


def _tensor_from_bytes(name: str, shape: Iterable[int], raw: bytes) -> torch.Tensor:
    if name not in _BY_NAME:
        raise AdapterFormatError(f"unknown dtype {name!r} in header")
    dtype, np_dtype = _BY_NAME[name]
    try:
        arr = np.frombuffer(raw, dtype=np_dtype).copy().reshape(tuple(shape))
    except (TypeError, ValueError) as e:
        raise AdapterFormatError(f"{len(raw)} bytes of {name} do not fill shape {list(shape)}") from e
    t = torch.from_numpy(arr)
    if dtype == torch.bfloat16:
        return t.view(torch.bfloat16)
    if dtype == torch.bool:
        return t.to(torch.bool)
    return t


def dump_container(
    tensors: Mapping[str, torch.Tensor],
    meta: Mapping[str, Any],
    magic: bytes,
    version: int = FORMAT_VERSION,
) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        dtype_name, raw = _tensor_bytes(t)
        entries.append(
            {"name": name, "dtype": dtype_name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta), "tensors": entries}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(magic, version, len(header)) + header + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def load_container(
    data: bytes, magic: bytes, versions: Iterable[int] = (FORMAT_VERSION,)
) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    if len(data) < _PREFIX.size + _CRC.size:
        raise AdapterFormatError("container is truncated")
    found, version, header_len = _PREFIX.unpack_from(data, 0)
    if found != magic:
        raise AdapterFormatError(f"bad magic {found!r}, expected {magic!r}")
    body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch: container is corrupted")
    if version not in tuple(versions):
        raise UnknownVersionError(f"unsupported container version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise AdapterFormatError(f"unreadable header: {e}") from e
    payload = body[start + header_len :]
    tensors = {}
    try:
        for entry in header["tensors"]:
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            if len(raw) != entry["nbytes"]:
                raise AdapterFormatError(f"tensor {entry['name']} overruns the payload")
            tensors[entry["name"]] = _tensor_from_bytes(entry["dtype"], entry["shape"], raw)
        return tensors, header["meta"]
    except (KeyError, TypeError) as e:
        raise AdapterFormatError(f"malformed header: {e!r}") from e


def write_container(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def state_checksum(module: torch.nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(_tensor_bytes(t)[1])
    return h.hexdigest()


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
