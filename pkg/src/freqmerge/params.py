"""Named-tensor checkpoints: on-disk format, arithmetic, and statistics.

A checkpoint is an ordered map from tensor name to a dense float32 array.
Iteration order is always lexicographic by name; that ordering defines the
payload layout on disk and the global flat index used by sparse experts.

File layout (compatible with the safetensors container):

    bytes 0..7    little-endian u64 header length N
    bytes 8..8+N  UTF-8 JSON: name -> {"dtype":"F32","shape":[..],
                  "data_offsets":[begin,end]}, keys in lexicographic order,
                  offsets relative to the payload start; the optional
                  "__metadata__" key holds {"origin_tag": str}
    rest          concatenated little-endian f32 buffers, no padding
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import (
    DuplicateTensorNameError,
    EmptyTaskVectorError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
)

METADATA_KEY = "__metadata__"

FNV1A64_OFFSET = 0xCBF29CE484222325
FNV1A64_PRIME = 0x100000001B3


@dataclass(frozen=True)
class TensorMeta:
    """Shape and dtype of one named tensor. Only F32 is supported."""

    name: str
    shape: tuple[int, ...]
    dtype: str = "F32"

    @property
    def num_elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n


def _freeze(name: str, value) -> np.ndarray:
    if not name:
        raise ValueError("tensor name must be nonempty")
    arr = np.array(value, dtype=np.float32, order="C", copy=True)
    if arr.size < 1:
        raise ValueError(f"tensor {name!r} has no elements")
    arr.flags.writeable = False
    return arr


class _TensorStore:
    """Shared behaviour of Checkpoint and TaskVector: a sorted, immutable
    name -> float32 array map."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        if not isinstance(tensors, Mapping):
            raise TypeError("tensors must be a mapping of name -> array")
        self._tensors = {name: _freeze(name, tensors[name]) for name in sorted(tensors)}

    @property
    def tensors(self) -> dict[str, np.ndarray]:
        return self._tensors

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def names(self) -> list[str]:
        return list(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    @property
    def num_params(self) -> int:
        return sum(arr.size for arr in self._tensors.values())

    def metas(self) -> list[TensorMeta]:
        return [TensorMeta(name, arr.shape) for name, arr in self.items()]

    def same_structure(self, other: "_TensorStore") -> None:
        """Raise ShapeMismatchError unless names and shapes agree exactly."""
        if self.names() != other.names():
            raise ShapeMismatchError(
                f"tensor names differ: {self.names()} vs {other.names()}"
            )
        for name, arr in self.items():
            if arr.shape != other[name].shape:
                raise ShapeMismatchError(
                    f"tensor {name!r}: shape {arr.shape} vs {other[name].shape}"
                )


class Checkpoint(_TensorStore):
    """Immutable set of named float32 tensors plus an optional origin tag."""

    __slots__ = ("origin_tag",)

    def __init__(self, tensors: Mapping[str, np.ndarray], origin_tag: str | None = None):
        super().__init__(tensors)
        self.origin_tag = origin_tag

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.origin_tag != other.origin_tag or self.names() != other.names():
            return False
        return all(
            a.shape == other[n].shape and np.array_equal(a, other[n])
            for n, a in self.items()
        )

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, {self.num_params} params, tag={self.origin_tag!r})"


class TaskVector(_TensorStore):
    """Checkpoint-shaped delta between a fine-tuned model and its ancestor."""

    __slots__ = ("task_id",)

    def __init__(self, tensors: Mapping[str, np.ndarray], task_id: str):
        super().__init__(tensors)
        self.task_id = task_id

    def __repr__(self) -> str:
        return f"TaskVector({self.task_id!r}, {len(self)} tensors, {self.num_params} params)"


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize deterministically; equal checkpoints yield equal bytes."""
    table: dict[str, object] = {}
    if ckpt.origin_tag is not None:
        table[METADATA_KEY] = {"origin_tag": ckpt.origin_tag}
    offset = 0
    for name, arr in ckpt.items():
        nbytes = arr.size * 4
        table[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    header = json.dumps(table, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<Q", len(header)), header]
    parts.extend(arr.astype("<f4", copy=False).tobytes(order="C") for _, arr in ckpt.items())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the checkpoint atomically (temp file + rename)."""
    path = Path(path)
    data = checkpoint_to_bytes(ckpt)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _parse_header(raw: bytes) -> dict:
    def reject_duplicates(pairs):
        seen = set()
        for key, _ in pairs:
            if key in seen:
                raise DuplicateTensorNameError(f"duplicate tensor name {key!r}")
            seen.add(key)
        return dict(pairs)

    try:
        text = raw.decode("utf-8")
        table = json.loads(text, object_pairs_hook=reject_duplicates)
    except DuplicateTensorNameError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(table, dict):
        raise MalformedHeaderError("header must be a JSON object")
    return table


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 8:
        raise MalformedHeaderError("file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", data[:8])
    if 8 + header_len > len(data):
        raise TruncatedPayloadError(
            f"declared header length {header_len} exceeds file size {len(data)}"
        )
    table = _parse_header(data[8 : 8 + header_len])

    origin_tag = None
    meta = table.pop(METADATA_KEY, None)
    if meta is not None:
        if not isinstance(meta, dict):
            raise MalformedHeaderError("__metadata__ must be an object")
        origin_tag = meta.get("origin_tag")
        if origin_tag is not None and not isinstance(origin_tag, str):
            raise MalformedHeaderError("origin_tag must be a string")

    payload = data[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    # Canonical files list tensors lexicographically with contiguous offsets.
    for name in sorted(table):
        entry = table[name]
        if not isinstance(entry, dict):
            raise MalformedHeaderError(f"entry for {name!r} must be an object")
        dtype = entry.get("dtype")
        if dtype != "F32":
            raise UnsupportedDtypeError(f"tensor {name!r} has dtype {dtype!r}, only F32 is supported")
        shape = entry.get("shape")
        if (
            not isinstance(shape, list)
            or not all(isinstance(s, int) and s > 0 for s in shape)
        ):
            raise MalformedHeaderError(f"tensor {name!r} has invalid shape {shape!r}")
        offsets = entry.get("data_offsets")
        if not (isinstance(offsets, list) and len(offsets) == 2):
            raise MalformedHeaderError(f"tensor {name!r} has invalid data_offsets")
        begin, end = offsets
        count = 1
        for s in shape:
            count *= s
        if begin != expected_offset or end != begin + 4 * count:
            raise MalformedHeaderError(
                f"tensor {name!r}: offsets [{begin},{end}] are not contiguous"
            )
        if end > len(payload):
            raise TruncatedPayloadError(
                f"tensor {name!r} needs payload bytes up to {end}, have {len(payload)}"
            )
        buf = np.frombuffer(payload, dtype="<f4", count=count, offset=begin)
        tensors[name] = buf.reshape(shape).copy()
        expected_offset = end
    if expected_offset != len(payload):
        raise MalformedHeaderError(
            f"payload has {len(payload) - expected_offset} trailing bytes"
        )
    return Checkpoint(tensors, origin_tag=origin_tag)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def _derive_task_id(fine: Checkpoint) -> str:
    tag = fine.origin_tag or ""
    if tag.startswith("task:"):
        return tag[len("task:") :]
    return tag or "task"


def task_vector(fine: Checkpoint, pre: Checkpoint, task_id: str | None = None) -> TaskVector:
    """Elementwise fine - pre. Structures must match exactly."""
    fine.same_structure(pre)
    deltas = {
        name: (arr.astype(np.float64) - pre[name].astype(np.float64)).astype(np.float32)
        for name, arr in fine.items()
    }
    return TaskVector(deltas, task_id=task_id if task_id is not None else _derive_task_id(fine))


def apply_delta(base: Checkpoint, delta: TaskVector, scale: float) -> Checkpoint:
    """base + scale * delta, elementwise. scale=0 returns base values exactly."""
    base.same_structure(delta)
    if scale == 0.0:
        return Checkpoint(dict(base.tensors), origin_tag=base.origin_tag)
    out = {
        name: (arr.astype(np.float64) + scale * delta[name].astype(np.float64)).astype(np.float32)
        for name, arr in base.items()
    }
    return Checkpoint(out, origin_tag=base.origin_tag)


def mean_abs(v: TaskVector) -> float:
    """Global mean of absolute values over every element of every tensor.

    numpy's pairwise summation keeps the result reproducible across runs.
    """
    if len(v) == 0:
        raise EmptyTaskVectorError("task vector has no tensors")
    total = 0.0
    count = 0
    for _, arr in v.items():
        total += float(np.abs(arr, dtype=np.float64).sum(dtype=np.float64))
        count += arr.size
    return total / count


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    h = FNV1A64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV1A64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h
