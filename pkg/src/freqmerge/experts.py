"""Lightweight sparse task experts: extraction, storage, and composition.

An expert keeps the globally largest-magnitude entries of a task vector,
rescaled so that a heavily down-weighted task gets a stronger correction:

    mu = -mean|selected| * ln(d) / (lambda * mean|v|)

Selected values are stored pre-scaled, so composing an expert into a backbone
is a plain scatter-add.  A bundle binds its experts to one specific backbone
through a 64-bit FNV-1a checksum of the backbone's serialized bytes.

Bundle file layout:

    bytes 0..7   little-endian u64 manifest length N
    bytes 8..8+N UTF-8 JSON manifest {"backbone_fnv1a": hex,
                 "experts":[{"task_id","d","mu",
                             "tensors":[{"name","shape","count"}]}]}
    rest         per-tensor blocks in manifest order:
                 count x u32-LE indices, then count x f32-LE values
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BundleFormatError,
    ChecksumMismatchError,
    NonConvergenceError,
    ZeroTaskVectorError,
)
from .params import Checkpoint, TaskVector, checkpoint_to_bytes, fnv1a64, mean_abs


@dataclass
class ExpertTensor:
    """Sparse entries of one source tensor: sorted flat indices plus values."""

    name: str
    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ValueError(f"tensor {self.name!r}: indices and values must be aligned 1-D arrays")
        size = 1
        for s in self.shape:
            size *= s
        if self.indices.size:
            if int(self.indices[-1]) >= size:
                raise ValueError(f"tensor {self.name!r}: index out of bounds")
            if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
                raise ValueError(f"tensor {self.name!r}: indices must be strictly increasing")


@dataclass
class SparseExpert:
    """Per-task sparse delta with its kept fraction and rescale factor."""

    task_id: str
    d: float
    mu: float
    tensors: list[ExpertTensor]

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ValueError(f"rescale factor must be finite, got {self.mu}")

    @property
    def entry_count(self) -> int:
        return sum(t.indices.size for t in self.tensors)


@dataclass
class ExpertBundle:
    """Experts keyed by task, bound to one backbone by checksum."""

    backbone_fnv1a: int
    experts: dict[str, SparseExpert] = field(default_factory=dict)

    def __post_init__(self):
        for task_id, expert in self.experts.items():
            if expert.task_id != task_id:
                raise ValueError(f"bundle key {task_id!r} does not match expert {expert.task_id!r}")

    @property
    def task_ids(self) -> list[str]:
        return list(self.experts)

    def __len__(self) -> int:
        return len(self.experts)


def backbone_checksum(ckpt: Checkpoint) -> int:
    """Checksum a checkpoint exactly as its serialized file would hash."""
    return fnv1a64(checkpoint_to_bytes(ckpt))


def _entry_budget(d: float, m: int) -> int:
    if not 0.0 < d <= 1.0:
        raise ValueError(f"kept fraction d must lie in (0, 1], got {d}")
    # epsilon guards float products like 0.3*10 ticking over the ceil boundary
    return min(m, max(1, math.ceil(d * m - 1e-9)))


def topd_select(tv: TaskVector, d: float) -> SparseExpert:
    """Keep the ceil(d*m) globally largest-magnitude entries, unscaled.

    Ties break toward the lowest global flat index, tensors ordered
    lexicographically by name.
    """
    m = tv.num_params
    budget = _entry_budget(d, m)
    flat = np.concatenate([arr.astype(np.float64).ravel() for _, arr in tv.items()])
    order = np.argsort(-np.abs(flat), kind="stable")
    chosen = np.sort(order[:budget])

    tensors = []
    cursor = 0
    for name, arr in tv.items():
        in_tensor = chosen[(chosen >= cursor) & (chosen < cursor + arr.size)] - cursor
        tensors.append(
            ExpertTensor(
                name=name,
                shape=arr.shape,
                indices=in_tensor.astype(np.uint32),
                values=arr.ravel()[in_tensor],
            )
        )
        cursor += arr.size
    return SparseExpert(task_id=tv.task_id, d=d, mu=1.0, tensors=tensors)


def rescale_factor(selected: SparseExpert, lam_i: float, e_v: float, d: float) -> float:
    """Compensation factor -E(M) * ln(d) / (lam_i * e_v).

    E(M) is the global mean magnitude of the masked vector over all source
    parameters, discarded entries counting as zero.  That matches how e_v
    averages the full task vector; averaging the kept entries alone would
    inflate the factor by 1/d and swamp the backbone.
    """
    if not 0.0 < d <= 1.0:
        raise ValueError(f"kept fraction d must lie in (0, 1], got {d}")
    if d == 1.0:
        return 0.0
    denominator = lam_i * e_v
    if denominator == 0.0:
        raise ZeroTaskVectorError("rescale factor undefined: lam_i * E(v) is zero")
    source_size = 0
    for t in selected.tensors:
        size = 1
        for s in t.shape:
            size *= s
        source_size += size
    if source_size == 0:
        raise ValueError("expert has no source tensors")
    total = sum(float(np.abs(t.values, dtype=np.float64).sum()) for t in selected.tensors)
    mean_masked = total / source_size
    return -mean_masked * math.log(d) / denominator


def extract_expert(tv: TaskVector, d: float, lam_i: float) -> SparseExpert:
    """Top-d selection with the rescale factor pre-applied to stored values."""
    e_v = mean_abs(tv)
    if e_v == 0.0:
        raise ZeroTaskVectorError(f"task vector {tv.task_id!r} is all zero")
    selected = topd_select(tv, d)
    mu = rescale_factor(selected, lam_i, e_v, d)
    scaled = [
        ExpertTensor(t.name, t.shape, t.indices, (t.values.astype(np.float64) * mu).astype(np.float32))
        for t in selected.tensors
    ]
    return SparseExpert(task_id=tv.task_id, d=d, mu=mu, tensors=scaled)


def bernoulli_expert(tv: TaskVector, d: float, seed: int) -> SparseExpert:
    """Ablation baseline: keep each entry with probability d, rescale by 1/d."""
    if not 0.0 < d <= 1.0:
        raise ValueError(f"keep probability d must lie in (0, 1], got {d}")
    tensors = []
    for position, (name, arr) in enumerate(tv.items()):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([seed % 2**64, position], dtype=np.uint64))
        )
        keep = rng.random(arr.size) < d
        indices = np.flatnonzero(keep).astype(np.uint32)
        values = (arr.ravel()[indices].astype(np.float64) / d).astype(np.float32)
        tensors.append(ExpertTensor(name, arr.shape, indices, values))
    return SparseExpert(task_id=tv.task_id, d=d, mu=1.0, tensors=tensors)


def compose(backbone: Checkpoint, bundle: ExpertBundle, weights: list[float]) -> Checkpoint:
    """Scatter-add weighted experts into a copy of the backbone.

    Zero-weight experts are skipped entirely, so an all-zero weight vector
    returns a bit-identical copy of the backbone.
    """
    if len(weights) != len(bundle):
        raise ValueError(f"got {len(weights)} weights for {len(bundle)} experts")
    if backbone_checksum(backbone) != bundle.backbone_fnv1a:
        raise ChecksumMismatchError("bundle was extracted against a different backbone")

    buffers = {name: arr.copy() for name, arr in backbone.items()}
    for weight, expert in zip(weights, bundle.experts.values()):
        if weight == 0.0:
            continue
        for block in expert.tensors:
            if block.name not in buffers:
                raise ValueError(f"expert tensor {block.name!r} not present in backbone")
            target = buffers[block.name]
            if target.shape != block.shape:
                raise ValueError(f"expert tensor {block.name!r} shape mismatch")
            target.reshape(-1)[block.indices] += np.float32(weight) * block.values
    return Checkpoint(buffers, origin_tag=backbone.origin_tag)


# ---------------------------------------------------------------------------
# low-rank ablation baseline
# ---------------------------------------------------------------------------


def _dominant_triple(res: np.ndarray, tol: float, max_iter: int):
    """Dominant singular triple of res by alternating power iteration."""
    cols = res.shape[1]
    v = np.sqrt((res * res).sum(axis=0))
    norm_v = np.linalg.norm(v)
    v = np.full(cols, 1.0 / math.sqrt(cols)) if norm_v == 0.0 else v / norm_v
    for _ in range(max_iter):
        u = res @ v
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            return 0.0, np.zeros(res.shape[0]), v
        u /= norm_u
        v_next = res.T @ u
        sigma = np.linalg.norm(v_next)
        if sigma == 0.0:
            return 0.0, u, v
        v_next = v_next / sigma
        drift = min(np.linalg.norm(v_next - v), np.linalg.norm(v_next + v))
        if drift <= tol:
            return float(sigma), u, v_next
        v = v_next
    raise NonConvergenceError(
        f"power iteration did not settle within {max_iter} iterations"
    )


def lowrank_matrix(mat: np.ndarray, rank: int, tol: float = 1e-8, max_iter: int = 500) -> np.ndarray:
    """Best rank-`rank` approximation via deflated power iteration."""
    rows, cols = mat.shape
    if not 1 <= rank <= min(rows, cols):
        raise ValueError(f"rank must lie in [1, {min(rows, cols)}], got {rank}")
    res = mat.astype(np.float64).copy()
    approx = np.zeros_like(res)
    scale = max(1.0, float(np.linalg.norm(res)))
    for _ in range(rank):
        if float(np.linalg.norm(res)) <= 1e-12 * scale:
            break  # residual exhausted; approximation is already exact
        sigma, u, v = _dominant_triple(res, tol, max_iter)
        if sigma == 0.0:
            break
        piece = sigma * np.outer(u, v)
        approx += piece
        res -= piece
    return approx


def lowrank_expert(tv: TaskVector, rank: int) -> TaskVector:
    """Ablation baseline: rank-r approximation of every matrix-shaped tensor."""
    out = {}
    for name, arr in tv.items():
        if arr.ndim == 2:
            out[name] = lowrank_matrix(arr, rank).astype(np.float32)
        else:
            out[name] = arr
    return TaskVector(out, task_id=tv.task_id)


# ---------------------------------------------------------------------------
# bundle serialization
# ---------------------------------------------------------------------------


def bundle_to_bytes(bundle: ExpertBundle) -> bytes:
    manifest = {
        "backbone_fnv1a": f"{bundle.backbone_fnv1a:016x}",
        "experts": [
            {
                "task_id": expert.task_id,
                "d": expert.d,
                "mu": expert.mu,
                "tensors": [
                    {"name": t.name, "shape": list(t.shape), "count": int(t.indices.size)}
                    for t in expert.tensors
                ],
            }
            for expert in bundle.experts.values()
        ],
    }
    encoded = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<Q", len(encoded)), encoded]
    for expert in bundle.experts.values():
        for t in expert.tensors:
            parts.append(t.indices.astype("<u4", copy=False).tobytes())
            parts.append(t.values.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def save_bundle(bundle: ExpertBundle, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(bundle_to_bytes(bundle))
    os.replace(tmp, path)


def bundle_from_bytes(data: bytes) -> ExpertBundle:
    if len(data) < 8:
        raise BundleFormatError("bundle shorter than the 8-byte length prefix")
    (manifest_len,) = struct.unpack("<Q", data[:8])
    if 8 + manifest_len > len(data):
        raise BundleFormatError("declared manifest length exceeds file size")
    try:
        manifest = json.loads(data[8 : 8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "experts" not in manifest:
        raise BundleFormatError("manifest must be an object with an experts list")
    try:
        checksum = int(manifest["backbone_fnv1a"], 16)
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleFormatError("manifest lacks a valid backbone_fnv1a") from exc

    cursor = 8 + manifest_len
    experts: dict[str, SparseExpert] = {}
    for spec in manifest["experts"]:
        try:
            task_id = spec["task_id"]
            d = float(spec["d"])
            mu = float(spec["mu"])
            tensor_specs = spec["tensors"]
        except (KeyError, TypeError) as exc:
            raise BundleFormatError(f"malformed expert entry: {exc}") from exc
        tensors = []
        for tspec in tensor_specs:
            count = int(tspec["count"])
            need = count * 8
            if cursor + need > len(data):
                raise BundleFormatError(f"tensor block for {tspec.get('name')!r} truncated")
            indices = np.frombuffer(data, dtype="<u4", count=count, offset=cursor).copy()
            values = np.frombuffer(data, dtype="<f4", count=count, offset=cursor + count * 4).copy()
            cursor += need
            try:
                tensors.append(ExpertTensor(tspec["name"], tuple(tspec["shape"]), indices, values))
            except (KeyError, TypeError, ValueError) as exc:
                raise BundleFormatError(f"invalid tensor block: {exc}") from exc
        if task_id in experts:
            raise BundleFormatError(f"duplicate task id {task_id!r} in bundle")
        experts[task_id] = SparseExpert(task_id=task_id, d=d, mu=mu, tensors=tensors)
    if cursor != len(data):
        raise BundleFormatError(f"bundle has {len(data) - cursor} trailing bytes")
    return ExpertBundle(backbone_fnv1a=checksum, experts=experts)


def load_bundle(path: str | Path) -> ExpertBundle:
    return bundle_from_bytes(Path(path).read_bytes())
