"""Backbone construction: filtered merging plus the cost-free baselines.

The filtered merge builds theta_m = theta_pre + sum_i lambda_i * filter(v_i)
where the coefficients are the mean-magnitude shares of the unfiltered task
vectors, so the merged deltas keep the scale of the inputs.  Baselines
(weight averaging, task arithmetic, trim/elect-sign merging, random dropout)
share the same checkpoint plumbing.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeMismatchError, ZeroTaskVectorError
from .params import Checkpoint, TaskVector, mean_abs
from .spectral import FilterSpec, filter_tensor

DEFAULT_RHO = 0.3  # best average in the removed-fraction sweep


@dataclass(frozen=True)
class MergeWeights:
    """Per-task merging coefficients; nonnegative, summing to one."""

    lambdas: tuple[float, ...]

    def __post_init__(self):
        if any(l < 0 for l in self.lambdas):
            raise ValueError("merging coefficients must be nonnegative")
        if self.lambdas and abs(sum(self.lambdas) - 1.0) > 1e-9:
            raise ValueError(f"coefficients must sum to 1, got {sum(self.lambdas)}")


@dataclass
class MergeReport:
    """Diagnostics emitted alongside a merged backbone."""

    method: str
    rho: float
    lambdas: list[float]
    energy_ratios: dict[str, float] = field(default_factory=dict)
    wall_time_ms: float = 0.0
    param_count: int = 0
    task_count: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        for value in (out["rho"], out["wall_time_ms"], *out["lambdas"], *out["energy_ratios"].values()):
            if not math.isfinite(value):
                raise ValueError(f"non-finite value in merge report: {value}")
        return out


def merging_coefficients(tvs: list[TaskVector]) -> MergeWeights:
    """Mean-magnitude share of each task vector: E(v_i) / sum_j E(v_j)."""
    if not tvs:
        raise ValueError("need at least one task vector")
    magnitudes = [mean_abs(tv) for tv in tvs]
    total = sum(magnitudes)
    if total == 0.0:
        raise ZeroTaskVectorError("all task vectors are zero; coefficients are undefined")
    return MergeWeights(tuple(m / total for m in magnitudes))


def filter_task_vector(tv: TaskVector, spec: FilterSpec) -> TaskVector:
    """Apply the spectral filter to every tensor of a task vector."""
    return TaskVector(
        {name: filter_tensor(arr, spec) for name, arr in tv.items()},
        task_id=tv.task_id,
    )


def _check_compatible(pre: Checkpoint, tvs: list[TaskVector]) -> None:
    for tv in tvs:
        pre.same_structure(tv)


def filtered_merge(
    pre: Checkpoint, tvs: list[TaskVector], spec: FilterSpec, method: str = "fr"
) -> tuple[Checkpoint, MergeReport]:
    """Merge task vectors after spectral filtering.

    Coefficients are computed on the unfiltered task vectors, so they do not
    depend on the filter setting.
    """
    started = time.perf_counter()
    _check_compatible(pre, tvs)
    weights = merging_coefficients(tvs)

    accum = {name: np.zeros(arr.shape, dtype=np.float64) for name, arr in pre.items()}
    kept = dict.fromkeys(accum, 0.0)
    total = dict.fromkeys(accum, 0.0)
    for tv, lam in zip(tvs, weights.lambdas):
        for name, arr in tv.items():
            raw = arr.astype(np.float64)
            filtered = filter_tensor(raw, spec)
            accum[name] += lam * filtered
            kept[name] += float(np.sum(filtered * filtered))
            total[name] += float(np.sum(raw * raw))

    merged = Checkpoint(
        {name: (pre[name].astype(np.float64) + accum[name]).astype(np.float32) for name in accum},
        origin_tag=f"merged:{method}",
    )
    ratios = {name: (kept[name] / total[name] if total[name] > 0.0 else 1.0) for name in accum}
    report = MergeReport(
        method=method,
        rho=spec.rho if spec.mode != "band_stop" else spec.rho_hi - spec.rho_lo,
        lambdas=list(weights.lambdas),
        energy_ratios=ratios,
        wall_time_ms=(time.perf_counter() - started) * 1e3,
        param_count=pre.num_params,
        task_count=len(tvs),
    )
    return merged, report


def fr_merge(pre: Checkpoint, tvs: list[TaskVector], rho: float) -> tuple[Checkpoint, MergeReport]:
    """High-pass filtered merge; the default backbone construction."""
    return filtered_merge(pre, tvs, FilterSpec.high_pass(rho), method="fr")


def weight_average(ckpts: list[Checkpoint]) -> Checkpoint:
    """Plain elementwise mean of checkpoints."""
    if not ckpts:
        raise ValueError("need at least one checkpoint")
    first = ckpts[0]
    for other in ckpts[1:]:
        first.same_structure(other)
    out = {}
    for name, arr in first.items():
        stack = np.zeros(arr.shape, dtype=np.float64)
        for ckpt in ckpts:
            stack += ckpt[name].astype(np.float64)
        out[name] = (stack / len(ckpts)).astype(np.float32)
    return Checkpoint(out, origin_tag="merged:avg")


def task_arithmetic(pre: Checkpoint, tvs: list[TaskVector], lam: float) -> Checkpoint:
    """theta_pre + lam * sum of task vectors."""
    _check_compatible(pre, tvs)
    out = {}
    for name, arr in pre.items():
        acc = arr.astype(np.float64).copy()
        for tv in tvs:
            acc += lam * tv[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return Checkpoint(out, origin_tag="merged:ta")


def _trim_global(flat: np.ndarray, keep: int) -> np.ndarray:
    """Zero everything but the `keep` largest-magnitude entries.

    Ties go to the lowest flat index, matching the expert selection rule.
    """
    if keep >= flat.size:
        return flat.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    trimmed = np.zeros_like(flat)
    chosen = order[:keep]
    trimmed[chosen] = flat[chosen]
    return trimmed


def ties_merge(pre: Checkpoint, tvs: list[TaskVector], keep_frac: float) -> Checkpoint:
    """Trim, elect a per-parameter sign, then average the agreeing entries."""
    if not 0.0 < keep_frac <= 1.0:
        raise ValueError(f"keep_frac must lie in (0, 1], got {keep_frac}")
    _check_compatible(pre, tvs)
    m = pre.num_params
    keep = max(1, math.ceil(keep_frac * m - 1e-9))

    flats = []
    for tv in tvs:
        flat = np.concatenate([tv[name].astype(np.float64).ravel() for name in pre.names()])
        flats.append(_trim_global(flat, keep))

    stacked = np.stack(flats)
    elected = np.sign(stacked.sum(axis=0))
    elected[elected == 0] = 1.0
    agree = (np.sign(stacked) == elected) & (stacked != 0.0)
    counts = agree.sum(axis=0)
    merged_flat = np.where(counts > 0, (stacked * agree).sum(axis=0) / np.maximum(counts, 1), 0.0)

    out = {}
    cursor = 0
    for name, arr in pre.items():
        chunk = merged_flat[cursor : cursor + arr.size].reshape(arr.shape)
        out[name] = (arr.astype(np.float64) + chunk).astype(np.float32)
        cursor += arr.size
    return Checkpoint(out, origin_tag="merged:ties")


def dare_drop(tv: TaskVector, p: float, seed: int) -> TaskVector:
    """Drop entries with probability p and rescale survivors by 1/(1-p).

    Each tensor draws from its own counter-based stream keyed by (seed,
    tensor position), so results do not depend on evaluation order.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return TaskVector(dict(tv.tensors), task_id=tv.task_id)
    out = {}
    for position, (name, arr) in enumerate(tv.items()):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([seed % 2**64, position], dtype=np.uint64))
        )
        keep = rng.random(arr.shape) >= p
        out[name] = (arr.astype(np.float64) * keep / (1.0 - p)).astype(np.float32)
    return TaskVector(out, task_id=tv.task_id)
