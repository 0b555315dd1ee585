"""Self-contained desk-scale lab: synthetic tasks and tiny MLP training.

Tasks are Gaussian blob classification problems whose class centers sit on a
circle; each task rotates the layout by its own angle, so tasks overlap in
input space and genuinely conflict when their fine-tuned weights are merged.
All tasks share one output head: task k owns a contiguous block of class
indices, which keeps every checkpoint shape-compatible for merging.

Everything is plain float32 numpy with seeded Philox streams; a run is
bit-reproducible from its seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeMismatchError, TrainingDivergedError
from .params import Checkpoint, TaskVector, apply_delta
from .spectral import FilterSpec, filter_tensor


def _philox(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=np.array([seed % 2**64, stream], dtype=np.uint64))
    )


@dataclass(frozen=True)
class TaskSpec:
    """One synthetic classification task."""

    task_id: str
    centers: tuple[tuple[float, ...], ...]
    n_classes: int = 3
    input_dim: int = 2
    rotation: float = 0.0
    sigma: float = 0.35
    n_train: int = 512
    n_test: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("a task needs at least two classes")
        if self.sigma <= 0:
            raise ValueError("noise sigma must be positive")
        if len(self.centers) != self.n_classes:
            raise ValueError("one center per class required")
        if len(set(self.centers)) != len(self.centers):
            raise ValueError("class centers must be pairwise distinct")


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths of the shared classifier; rectifier activations.

    The lab classifier is bias-free by default: every parameter then acts
    through input-gated weights, which keeps sparse expert edits selective
    for the inputs their task actually sees.
    """

    widths: tuple[int, ...] = (2, 32, 32, 9)
    activation: str = "relu"
    seed: int = 0
    use_bias: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Plain SGD settings. lr=0 is allowed and leaves parameters untouched."""

    lr: float
    epochs: int
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class Dataset:
    """Train/test split of one task, labels stored task-locally."""

    task_id: str
    class_offset: int
    n_classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def train_labels_global(self) -> np.ndarray:
        return self.train_y + self.class_offset

    @property
    def test_labels_global(self) -> np.ndarray:
        return self.test_y + self.class_offset


def _rotated_centers(spec: TaskSpec) -> np.ndarray:
    centers = np.asarray(spec.centers, dtype=np.float64)
    if spec.input_dim >= 2 and spec.rotation != 0.0:
        c, s = math.cos(spec.rotation), math.sin(spec.rotation)
        xy = centers[:, :2] @ np.array([[c, s], [-s, c]])
        centers = centers.copy()
        centers[:, :2] = xy
    return centers


def gen_task(spec: TaskSpec, class_offset: int = 0) -> Dataset:
    """Sample Gaussian blobs around the task's rotated centers."""
    rng = _philox(spec.seed)
    total = spec.n_train + spec.n_test
    labels = rng.integers(0, spec.n_classes, size=total)
    centers = _rotated_centers(spec)
    points = centers[labels] + spec.sigma * rng.standard_normal((total, spec.input_dim))
    x = points.astype(np.float32)
    y = labels.astype(np.int64)
    return Dataset(
        task_id=spec.task_id,
        class_offset=class_offset,
        n_classes=spec.n_classes,
        train_x=x[: spec.n_train],
        train_y=y[: spec.n_train],
        test_x=x[spec.n_train :],
        test_y=y[spec.n_train :],
    )


# ---------------------------------------------------------------------------
# tiny MLP
# ---------------------------------------------------------------------------


def init_mlp(spec: MLPSpec) -> Checkpoint:
    """He-initialized weights; biases (zero-initialized) only when requested."""
    rng = _philox(spec.seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths, spec.widths[1:])):
        scale = math.sqrt(2.0 / fan_in)
        params[f"layer{i}.weight"] = (scale * rng.standard_normal((fan_in, fan_out))).astype(
            np.float32
        )
        if spec.use_bias:
            params[f"layer{i}.bias"] = np.zeros(fan_out, dtype=np.float32)
    return Checkpoint(params)


def _layer_count(params: dict[str, np.ndarray]) -> int:
    return sum(1 for name in params if name.endswith(".weight"))


def forward(model: Checkpoint | dict, x: np.ndarray) -> np.ndarray:
    """Logits of the shared head for a batch of inputs."""
    params = model.tensors if isinstance(model, Checkpoint) else model
    h = np.asarray(x, dtype=np.float32)
    if h.ndim == 1:
        h = h[None, :]
    n_layers = _layer_count(params)
    if h.shape[1] != params["layer0.weight"].shape[0]:
        raise ShapeMismatchError(
            f"input dim {h.shape[1]} does not match model dim {params['layer0.weight'].shape[0]}"
        )
    for i in range(n_layers):
        h = h @ params[f"layer{i}.weight"]
        bias = params.get(f"layer{i}.bias")
        if bias is not None:
            h = h + bias
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(params, x, y) -> float:
    probs = _softmax(forward(params, x))
    picked = probs[np.arange(y.size), y]
    return float(-np.log(np.maximum(picked, 1e-30)).mean())


def _sgd_step(params, x, y, lr, weight_decay):
    n_layers = _layer_count(params)
    acts = [x]
    pre = []
    h = x
    for i in range(n_layers):
        z = h @ params[f"layer{i}.weight"]
        bias = params.get(f"layer{i}.bias")
        if bias is not None:
            z = z + bias
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)

    probs = _softmax(acts[-1])
    delta = probs
    delta[np.arange(y.size), y] -= 1.0
    delta /= np.float32(y.size)

    for i in reversed(range(n_layers)):
        w_name, b_name = f"layer{i}.weight", f"layer{i}.bias"
        grad_w = acts[i].T @ delta
        grad_b = delta.sum(axis=0) if b_name in params else None
        if i > 0:
            delta = (delta @ params[w_name].T) * (pre[i - 1] > 0)
        params[w_name] = params[w_name] - lr * (grad_w + weight_decay * params[w_name])
        if grad_b is not None:
            params[b_name] = params[b_name] - lr * grad_b


def _train(start: Checkpoint, x, y, cfg: TrainConfig) -> tuple[dict, list[float]]:
    """SGD loop; returns trained parameters and pre/per-epoch losses."""
    params = {name: arr.copy() for name, arr in start.items()}
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    rng = _philox(cfg.seed, stream=1)
    lr = np.float32(cfg.lr)
    wd = np.float32(cfg.weight_decay)
    losses = [_cross_entropy(params, x, y)]
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for lo in range(0, x.shape[0], cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            _sgd_step(params, x[batch], y[batch], lr, wd)
        loss = _cross_entropy(params, x, y)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss}")
        losses.append(loss)
    return params, losses


def pretrain(
    specs: list[TaskSpec], mlp: MLPSpec, cfg: TrainConfig, subset: int = 0
) -> Checkpoint:
    """Train the shared ancestor on a mixture of every task's train split.

    ``subset`` caps how many training points each task contributes; the
    default uses everything.
    """
    datasets = build_datasets(specs)
    take = subset if subset > 0 else None
    x = np.concatenate([ds.train_x[:take] for ds in datasets])
    y = np.concatenate([ds.train_labels_global[:take] for ds in datasets])
    params, losses = _train(init_mlp(mlp), x, y, cfg)
    if not losses[-1] < losses[0]:
        raise TrainingDivergedError(
            f"pretraining loss did not decrease ({losses[0]:.4f} -> {losses[-1]:.4f})"
        )
    return Checkpoint(params, origin_tag="pretrained")


def finetune(pre: Checkpoint, task: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Continue training from the ancestor on a single task."""
    params, _ = _train(pre, task.train_x, task.train_labels_global, cfg)
    return Checkpoint(params, origin_tag=f"task:{task.task_id}")


def evaluate(model: Checkpoint, data: Dataset) -> float:
    """Fraction of test points whose argmax logit hits the global label."""
    logits = forward(model, data.test_x)
    predictions = logits.argmax(axis=1)
    return float((predictions == data.test_labels_global).mean())


def generalization_matrix(
    pre: Checkpoint,
    tvs: list[TaskVector],
    datasets: list[Dataset],
    rho: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Accuracy of pre + (filtered|raw) v_i on dataset j, for every (i, j).

    Rows index the added task vector, columns the evaluation dataset.
    Returns (filtered, unfiltered) matrices.
    """
    if len(tvs) != len(datasets):
        raise ValueError("need one dataset per task vector")
    spec = FilterSpec.high_pass(rho)
    n = len(tvs)
    filtered = np.zeros((n, n))
    unfiltered = np.zeros((n, n))
    for i, tv in enumerate(tvs):
        raw_model = apply_delta(pre, tv, 1.0)
        filtered_tv = TaskVector(
            {name: filter_tensor(arr, spec) for name, arr in tv.items()}, tv.task_id
        )
        filt_model = apply_delta(pre, filtered_tv, 1.0)
        for j, ds in enumerate(datasets):
            unfiltered[i, j] = evaluate(raw_model, ds)
            filtered[i, j] = evaluate(filt_model, ds)
    return filtered, unfiltered


# ---------------------------------------------------------------------------
# default lab configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabConfig:
    """Geometry and training settings for the default three-task lab.

    Tasks rotate a shared class layout, so their data overlaps and their
    fine-tuned weights conflict.  ``finetune_epoch_scale`` fine-tunes each
    task for a different number of epochs: unequal task-vector magnitudes are
    the regime where magnitude-normalized merging coefficients matter.
    """

    n_tasks: int = 3
    n_classes: int = 3
    input_dim: int = 2
    anchor_radius: float = 0.0
    class_radius: float = 2.0
    rotation_step: float = 0.5
    sigma: float = 0.35
    n_train: int = 512
    n_test: int = 512
    hidden: tuple[int, ...] = (32, 32)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=20))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=40))
    finetune_epoch_scale: tuple[float, ...] = ()
    finetune_lr_scale: tuple[float, ...] = ()
    # samples per task seen during pretraining; 0 means the full train split.
    # A starved ancestor leaves the task-specific capability to fine-tuning,
    # which is what makes merging fine-tuned models worthwhile at all.
    pretrain_subset: int = 0

    def finetune_config(self, task_index: int, seed: int) -> TrainConfig:
        epoch_scale = 1.0
        if self.finetune_epoch_scale:
            epoch_scale = self.finetune_epoch_scale[task_index % len(self.finetune_epoch_scale)]
        lr_scale = 1.0
        if self.finetune_lr_scale:
            lr_scale = self.finetune_lr_scale[task_index % len(self.finetune_lr_scale)]
        epochs = max(1, round(self.finetune.epochs * epoch_scale))
        return replace(
            self.finetune, epochs=epochs, lr=self.finetune.lr * lr_scale, seed=seed
        )

    @property
    def total_classes(self) -> int:
        return self.n_tasks * self.n_classes

    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.total_classes)

    def task_specs(self, seed: int) -> list[TaskSpec]:
        """Task k sits at its own anchor direction with a local class circle.

        anchor_radius = 0 collapses every task onto one shared circle (their
        rotated class layouts then conflict maximally); a large anchor radius
        spreads tasks into separate islands whose conflicts are mostly in the
        shared output head.
        """
        specs = []
        for k in range(self.n_tasks):
            anchor_angle = 2.0 * math.pi * k / self.n_tasks
            ax = self.anchor_radius * math.cos(anchor_angle)
            ay = self.anchor_radius * math.sin(anchor_angle)
            centers = []
            for c in range(self.n_classes):
                # per-task twist of the local class circle around the anchor
                angle = 2.0 * math.pi * c / self.n_classes + k * self.rotation_step
                center = [ax + self.class_radius * math.cos(angle),
                          ay + self.class_radius * math.sin(angle)]
                center += [0.0] * (self.input_dim - 2)
                centers.append(tuple(center[: self.input_dim]))
            specs.append(
                TaskSpec(
                    task_id=f"task{k}",
                    centers=tuple(centers),
                    n_classes=self.n_classes,
                    input_dim=self.input_dim,
                    sigma=self.sigma,
                    n_train=self.n_train,
                    n_test=self.n_test,
                    seed=seed * 7919 + k,
                )
            )
        return specs


@dataclass
class LabArtifacts:
    """Everything one seeded lab run produces."""

    config: LabConfig
    seed: int
    pretrained: Checkpoint
    finetuned: list[Checkpoint]
    task_vectors: list[TaskVector]
    datasets: list[Dataset]


def build_datasets(specs: list[TaskSpec]) -> list[Dataset]:
    datasets = []
    offset = 0
    for spec in specs:
        datasets.append(gen_task(spec, class_offset=offset))
        offset += spec.n_classes
    return datasets


def build_lab(config: LabConfig, seed: int) -> LabArtifacts:
    """Pretrain the ancestor and fine-tune one model per task."""
    from .params import task_vector  # local import keeps module load light

    specs = config.task_specs(seed)
    datasets = build_datasets(specs)
    mlp = MLPSpec(widths=config.widths(), seed=seed * 7919 + 211)
    pre = pretrain(
        specs, mlp, replace(config.pretrain, seed=seed * 7919 + 401),
        subset=config.pretrain_subset,
    )
    finetuned = []
    tvs = []
    for k, ds in enumerate(datasets):
        ckpt = finetune(pre, ds, config.finetune_config(k, seed * 7919 + 601 + k))
        finetuned.append(ckpt)
        tvs.append(task_vector(ckpt, pre))
    return LabArtifacts(config, seed, pre, finetuned, tvs, datasets)
