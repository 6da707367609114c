"""Named-tensor container and its binary checkpoint format.

Layout on disk::

    b"MUGVCKPT"                      8 bytes
    header length                    little-endian u64
    header                           UTF-8 JSON, keys sorted
    payload                          raw little-endian tensors, back to back

The header maps every tensor name to ``{"dtype", "shape", "offset", "length"}``
with offsets relative to the start of the payload.  Free-form string metadata
lives under the reserved ``"__metadata__"`` key.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigurationError,
    MalformedHeaderError,
    OverlappingOffsetsError,
    TruncatedPayloadError,
)

MAGIC = b"MUGVCKPT"
METADATA_KEY = "__metadata__"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "float16": np.dtype("<f2"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("?"),
}


class ParameterSet:
    """Ordered mapping of tensor name to numpy array, plus string metadata."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = (),
                 metadata: Mapping[str, str] | None = None):
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        for name, value in items:
            self[name] = value
        self.metadata: dict[str, str] = dict(metadata or {})

    def __setitem__(self, name: str, value) -> None:
        if name == METADATA_KEY:
            raise ConfigurationError(f"tensor name {name!r} is reserved")
        arr = np.asarray(value)
        if arr.dtype.name not in _DTYPES:
            raise ConfigurationError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_elements(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet(((k, v.copy()) for k, v in self.tensors.items()), self.metadata)

    def equals(self, other: "ParameterSet") -> bool:
        """Bit-exact comparison of names, dtypes, shapes, values and metadata."""
        if self.names() != other.names() or self.metadata != other.metadata:
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.tobytes() != b.tobytes():
                return False
        return True

    @classmethod
    def from_module(cls, module, metadata: Mapping[str, str] | None = None) -> "ParameterSet":
        """Snapshot a torch module's state dict."""
        state = module.state_dict()
        return cls(((k, v.detach().cpu().numpy().copy()) for k, v in state.items()), metadata)

    def load_into(self, module, strict: bool = True) -> None:
        import torch

        ref = module.state_dict()
        state = {}
        for k, v in self.tensors.items():
            dtype = ref[k].dtype if k in ref else None
            t = torch.from_numpy(np.array(v, copy=True))
            state[k] = t.to(dtype) if dtype is not None else t
        module.load_state_dict(state, strict=strict)


def _header(params: ParameterSet) -> tuple[dict, list[bytes]]:
    header: dict = {}
    blobs = []
    offset = 0
    for name in sorted(params.tensors):
        arr = params.tensors[name]
        dtype = _DTYPES[arr.dtype.name]
        blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        header[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    if params.metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in params.metadata.items()}
    return header, blobs


def to_bytes(params: ParameterSet) -> bytes:
    header, blobs = _header(params)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(raw)), raw, *blobs])


def save_checkpoint(params: ParameterSet, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(params))


def from_bytes(data: bytes) -> ParameterSet:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not a MUGVCKPT container")
    if len(data) < 16:
        raise TruncatedPayloadError("file ends inside the header length field")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise TruncatedPayloadError(f"header claims {hlen} bytes but file has {len(data) - 16}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")

    payload = memoryview(data)[16 + hlen:]
    metadata = header.pop(METADATA_KEY, {})
    spans = []
    for name, entry in header.items():
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise MalformedHeaderError(f"bad header entry for tensor {name!r}") from None
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if length != expected or offset < 0:
            raise MalformedHeaderError(
                f"tensor {name!r}: length {length} does not match shape {shape} ({expected} bytes)")
        if offset + length > len(payload):
            raise TruncatedPayloadError(
                f"tensor {name!r} needs bytes [{offset}, {offset + length}) "
                f"but payload has {len(payload)}")
        spans.append((offset, length, name, dtype, shape))

    spans.sort()
    for (o1, l1, n1, *_), (o2, _, n2, *_) in zip(spans, spans[1:]):
        if o1 + l1 > o2:
            raise OverlappingOffsetsError(f"tensors {n1!r} and {n2!r} overlap in the payload")

    params = ParameterSet(metadata=metadata)
    for offset, length, name, dtype, shape in sorted(spans, key=lambda s: s[2]):
        params[name] = np.frombuffer(payload[offset:offset + length], dtype=dtype).reshape(shape).copy()
    return params


def load_checkpoint(path: str | Path) -> ParameterSet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return from_bytes(data)


def read_header(path: str | Path) -> dict:
    """Return the parsed JSON header without loading the payload."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise BadMagicError("bad magic: not a MUGVCKPT container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    return json.loads(data[16:16 + hlen].decode("utf-8"))
