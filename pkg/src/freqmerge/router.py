"""Per-input expert routing: learned linear-softmax, perfect, and random.

Decisions are always hard one-hot (argmax).  The random mode draws each
decision from its own counter-based stream keyed by (seed, call index), so a
batch routed concurrently gets the same assignment in any evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import RoutingError, TrainingDivergedError
from .lab import TrainConfig

LEARNED = "learned"
PERFECT = "perfect"
RANDOM = "random"

_MODES = (LEARNED, PERFECT, RANDOM)


@dataclass
class RouterModel:
    mode: str
    task_ids: list[str]
    feature_dim: int = 0
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown router mode {self.mode!r}")
        if not self.task_ids:
            raise ValueError("router needs at least one task id")
        if self.mode == LEARNED:
            if self.weights is None or self.bias is None:
                raise ValueError("learned router needs weights and bias")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
                raise ValueError("router parameters must be finite")
            if self.weights.shape != (len(self.task_ids), self.feature_dim):
                raise ValueError("router weight shape does not match tasks x features")


@dataclass(frozen=True)
class RoutingDecision:
    """One-hot expert weights plus the winning task index."""

    weights: tuple[float, ...]
    chosen: int


def _one_hot(index: int, n: int) -> RoutingDecision:
    return RoutingDecision(tuple(1.0 if i == index else 0.0 for i in range(n)), index)


def featurize(x) -> np.ndarray:
    """Raw input plus its squared norm as one extra feature."""
    vec = np.asarray(x, dtype=np.float64).ravel()
    return np.concatenate([vec, [float(vec @ vec)]])


def _task_inputs(dataset) -> np.ndarray:
    if hasattr(dataset, "train_x"):
        return np.asarray(dataset.train_x, dtype=np.float64)
    return np.asarray(dataset, dtype=np.float64)


def train_router(datasets: list, cfg: TrainConfig, task_ids: list[str] | None = None) -> RouterModel:
    """Multinomial logistic regression on featurized inputs, task index as label."""
    if len(datasets) < 2:
        raise RoutingError("router training needs at least two tasks")
    inputs = [_task_inputs(ds) for ds in datasets]
    if any(arr.size == 0 for arr in inputs):
        raise RoutingError("router training got an empty task dataset")
    if task_ids is None:
        task_ids = [
            getattr(ds, "task_id", f"task{i}") for i, ds in enumerate(datasets)
        ]

    feats = np.concatenate([np.stack([featurize(row) for row in arr]) for arr in inputs])
    labels = np.concatenate(
        [np.full(arr.shape[0], i, dtype=np.int64) for i, arr in enumerate(inputs)]
    )
    n_tasks = len(inputs)
    dim = feats.shape[1]
    w = np.zeros((n_tasks, dim))
    b = np.zeros(n_tasks)

    def loss() -> float:
        scores = feats @ w.T + b
        scores -= scores.max(axis=1, keepdims=True)
        log_probs = scores - np.log(np.exp(scores).sum(axis=1, keepdims=True))
        return float(-log_probs[np.arange(labels.size), labels].mean())

    rng = np.random.Generator(
        np.random.Philox(key=np.array([cfg.seed % 2**64, 3], dtype=np.uint64))
    )
    initial = loss()
    for _ in range(cfg.epochs):
        order = rng.permutation(labels.size)
        for lo in range(0, labels.size, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            fb, yb = feats[batch], labels[batch]
            scores = fb @ w.T + b
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(yb.size), yb] -= 1.0
            probs /= yb.size
            w -= cfg.lr * (probs.T @ fb + cfg.weight_decay * w)
            b -= cfg.lr * probs.sum(axis=0)
    final = loss()
    if not np.isfinite(final):
        raise TrainingDivergedError(f"router loss became {final}")
    # indistinguishable tasks start at the optimum, so allow minibatch noise
    if final > initial + max(0.02 * initial, 1e-9):
        raise TrainingDivergedError(
            f"router loss increased ({initial:.4f} -> {final:.4f})"
        )
    return RouterModel(
        mode=LEARNED, task_ids=list(task_ids), feature_dim=dim, weights=w, bias=b, seed=cfg.seed
    )


def perfect_router(task_ids: list[str]) -> RouterModel:
    return RouterModel(mode=PERFECT, task_ids=list(task_ids))


def random_router(task_ids: list[str], seed: int) -> RouterModel:
    return RouterModel(mode=RANDOM, task_ids=list(task_ids), seed=seed)


def route(
    model: RouterModel,
    x,
    true_task_id: str | None = None,
    call_index: int = 0,
) -> RoutingDecision:
    """One routing decision; see module docstring for mode semantics."""
    n = len(model.task_ids)
    if model.mode == PERFECT:
        if true_task_id is None or true_task_id not in model.task_ids:
            raise RoutingError(f"perfect routing needs a known task id, got {true_task_id!r}")
        return _one_hot(model.task_ids.index(true_task_id), n)
    if model.mode == RANDOM:
        rng = np.random.Generator(
            np.random.Philox(
                key=np.array([model.seed % 2**64, call_index % 2**64], dtype=np.uint64)
            )
        )
        return _one_hot(int(rng.integers(0, n)), n)
    feats = featurize(x)
    if feats.size != model.feature_dim:
        raise RoutingError(
            f"feature dim {feats.size} does not match router dim {model.feature_dim}"
        )
    scores = model.weights @ feats + model.bias
    return _one_hot(int(np.argmax(scores)), n)


def router_to_json(model: RouterModel) -> str:
    payload = {
        "mode": model.mode,
        "task_ids": model.task_ids,
        "feature_dim": model.feature_dim,
        "weights": model.weights.ravel().tolist() if model.weights is not None else None,
        "bias": model.bias.tolist() if model.bias is not None else None,
        "seed": model.seed,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def router_from_json(text: str) -> RouterModel:
    payload = json.loads(text)
    weights = payload.get("weights")
    bias = payload.get("bias")
    n = len(payload["task_ids"])
    return RouterModel(
        mode=payload["mode"],
        task_ids=list(payload["task_ids"]),
        feature_dim=int(payload["feature_dim"]),
        weights=np.asarray(weights).reshape(n, int(payload["feature_dim"])) if weights else None,
        bias=np.asarray(bias) if bias else None,
        seed=int(payload.get("seed", 0)),
    )
