"""Training pipeline: warmup, per-task mask generation with weight rewind,
best-mask selection, alternating masked joint training, and the baselines.

The per-task loss is BCE for CTR and squared error for CVR, averaged over the
batch; the joint loss scales the active task's loss by its omega weight. A
task only ever updates its own subnetwork's MLP weights: masked entries get a
zero gradient from the masked forward, and the optimizer update itself is
gated by the task mask so moments built by the other task cannot leak in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import masking, metrics, model, nn
from .data import Batch, Dataset, batches
from .errors import ConfigError, StateError
from .masking import TaskMask
from .model import ModelConfig, ModelParams, SharingMode, Task, TASKS

# disjoint shuffle streams per stage
_WARMUP_EPOCH_BASE = 0
_MASKGEN_EPOCH_BASE = 100_000
_JOINT_EPOCH_BASE = 200_000
_BASELINE_EPOCH_BASE = 300_000


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    omega_ctr: float = 0.7
    omega_cvr: float = 0.3
    prune_fraction: float = 0.2  # q of Algorithm step 2b
    n_pruning: int = 3
    warmup_epochs: int = 1
    mask_epochs: int = 1
    joint_epochs: int = 1
    seed: int = 0
    sharing_mode: SharingMode = SharingMode.CONNECTION_SHARE

    def __post_init__(self):
        object.__setattr__(self, "sharing_mode", SharingMode(self.sharing_mode))
        if self.omega_ctr < 0 or self.omega_cvr < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 < self.prune_fraction < 1.0:
            raise ConfigError(f"prune_fraction must be in (0,1), got {self.prune_fraction}")
        if self.n_pruning < 1:
            raise ConfigError(f"n_pruning must be >= 1, got {self.n_pruning}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def omega(self, task: Task) -> float:
        return self.omega_ctr if Task(task) is Task.CTR else self.omega_cvr

    def to_kv_lines(self) -> list[str]:
        return [
            f"learning_rate={self.learning_rate!r}",
            f"batch_size={self.batch_size}",
            f"omega_ctr={self.omega_ctr!r}",
            f"omega_cvr={self.omega_cvr!r}",
            f"prune_fraction={self.prune_fraction!r}",
            f"n_pruning={self.n_pruning}",
            f"warmup_epochs={self.warmup_epochs}",
            f"mask_epochs={self.mask_epochs}",
            f"joint_epochs={self.joint_epochs}",
            f"seed={self.seed}",
            f"sharing_mode={self.sharing_mode.value}",
        ]


def _loss_and_dlogit(logits: np.ndarray, preds: np.ndarray, labels: np.ndarray,
                     task: Task) -> tuple[float, np.ndarray]:
    n = len(labels)
    if Task(task) is Task.CTR:
        # BCE via logits, overflow-safe
        loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))
        dlogit = (preds - labels) / n
    else:
        diff = preds - labels
        loss = float(np.mean(np.square(diff)))
        dlogit = 2.0 * diff * preds * (1.0 - preds) / n
    return loss, dlogit


def task_loss(batch: Batch, params: ModelParams, cfg: ModelConfig,
              mask: TaskMask | None = None) -> float:
    """Mean per-task loss of Eq-style per-task batching (BCE / squared error)."""
    if batch.n == 0:
        raise ConfigError("task_loss: empty batch")
    preds, cache = model.forward(batch.ids, params, cfg, batch.task,
                                 mask=mask, want_cache=True)
    loss, _ = _loss_and_dlogit(cache.logits, preds, batch.labels, batch.task)
    return loss


def joint_loss(batch: Batch, params: ModelParams, cfg: ModelConfig,
               tcfg: TrainConfig, mask: TaskMask | None = None) -> float:
    """omega_task * task_loss for the batch's task; the other task's gate is 0."""
    return tcfg.omega(batch.task) * task_loss(batch, params, cfg, mask)


def _mlp_update_masks(params: ModelParams, mask: TaskMask | None):
    """Per-block optimizer gates in params.blocks() order; None = ungated."""
    if mask is None:
        return None
    gates: list[np.ndarray | None] = [None] * len(params.embeddings)
    gates.extend(mask.layers)
    gates.extend([None] * len(params.mlp_biases))
    if params.head_weights is not None:
        for task in TASKS:
            gates.extend([None] * (len(params.head_weights[task])
                                   + len(params.head_biases[task])))
    return gates


def _train_step(params: ModelParams, cfg: ModelConfig, tcfg: TrainConfig,
                opt: nn.Adam, batch: Batch, mask: TaskMask | None,
                weight: float) -> float:
    preds, cache = model.forward(batch.ids, params, cfg, batch.task,
                                 mask=mask, want_cache=True)
    loss, dlogit = _loss_and_dlogit(cache.logits, preds, batch.labels, batch.task)
    grads = model.backward(weight * dlogit, cache, params, cfg, mask=mask)
    opt.step(grads.blocks(), _mlp_update_masks(params, mask))
    return weight * loss


def predict(params: ModelParams, cfg: ModelConfig, task: Task, ids: np.ndarray,
            mask: TaskMask | None = None, chunk: int = 8192) -> np.ndarray:
    out = [model.forward(ids[i:i + chunk], params, cfg, task, mask=mask)
           for i in range(0, len(ids), chunk)]
    return np.concatenate(out) if out else np.empty(0)


def evaluate(params: ModelParams, cfg: ModelConfig, task: Task,
             ids: np.ndarray, labels: np.ndarray,
             mask: TaskMask | None = None) -> float:
    """AUC for CTR (bigger better), MSE for CVR (smaller better)."""
    preds = predict(params, cfg, task, ids, mask=mask)
    if Task(task) is Task.CTR:
        return metrics.auc(labels, preds)
    return metrics.mse(labels, preds)


def warmup(params: ModelParams, dataset: Dataset, cfg: ModelConfig,
           tcfg: TrainConfig, history: list | None = None) -> None:
    """Algorithm step 1: train unmasked on the mixed stream, then freeze the
    trained weights as the rewind snapshot."""
    if all(dataset.task(t).n == 0 for t in TASKS):
        raise ConfigError("warmup: empty dataset")
    opt = nn.Adam(params.blocks(), tcfg.learning_rate)
    for epoch in range(tcfg.warmup_epochs):
        total, count = 0.0, 0
        for batch in batches(dataset, TASKS, tcfg.batch_size, tcfg.seed,
                             _WARMUP_EPOCH_BASE + epoch):
            total += _train_step(params, cfg, tcfg, opt, batch, None,
                                 tcfg.omega(batch.task))
            count += 1
        if history is not None:
            history.append({"stage": "warmup", "epoch": epoch,
                            "mean_loss": total / max(count, 1)})
    params.take_snapshot()


def _prune_fn(mode: SharingMode):
    if mode is SharingMode.NEURON_SHARE:
        return masking.prune_neurons
    return masking.prune_connections


def generate_masks(params: ModelParams, dataset: Dataset, cfg: ModelConfig,
                   tcfg: TrainConfig, history: list | None = None
                   ) -> tuple[dict[Task, list[TaskMask]], dict[Task, int]]:
    """Algorithm step 2: per-task iterative magnitude pruning with rewind.

    For each task, round r trains an epoch under mask r from the snapshot,
    scores mask r on the validation split, prunes to mask r+1, and rewinds.
    Returns all candidate masks (rounds 0..n_pruning) and the best round per
    task by validation AUC (CTR) / MSE (CVR). Live weights end rewound.
    """
    if params.init_snapshot is None:
        raise StateError("generate_masks called before warmup snapshot")
    prune = _prune_fn(tcfg.sharing_mode)
    all_masks: dict[Task, list[TaskMask]] = {}
    best_i: dict[Task, int] = {}
    for ti, task in enumerate(TASKS):
        ids_tr, labels_tr = dataset.subset(task, "train")
        if len(labels_tr) == 0:
            raise ConfigError(f"generate_masks: no training samples for task {task.value}")
        ids_val, labels_val = dataset.subset(task, "val")
        mask = TaskMask.all_ones(params.mlp_weights, task)
        candidates = [mask]
        scores = []
        for rnd in range(tcfg.n_pruning + 1):
            params.rewind()
            opt = nn.Adam(params.blocks(), tcfg.learning_rate)
            for epoch in range(tcfg.mask_epochs):
                stream_epoch = (_MASKGEN_EPOCH_BASE + ti * 10_000
                                + rnd * tcfg.mask_epochs + epoch)
                for batch in batches(dataset, [task], tcfg.batch_size,
                                     tcfg.seed, stream_epoch):
                    _train_step(params, cfg, tcfg, opt, batch, mask, 1.0)
            score = evaluate(params, cfg, task, ids_val, labels_val, mask=mask)
            scores.append(score)
            if history is not None:
                history.append({"stage": "mask_gen", "task": task.value,
                                "round": rnd,
                                "proportion_left": mask.survivor_fraction(),
                                "val": score})
            if rnd < tcfg.n_pruning:
                mask = prune(params.mlp_weights, mask, tcfg.prune_fraction)
                candidates.append(mask)
            params.rewind()
        all_masks[task] = candidates
        if task is Task.CTR:
            best = int(np.argmax(scores))
        else:
            best = int(np.argmin(scores))
        best_i[task] = best
    return all_masks, best_i


@dataclass
class TrainedArtifacts:
    mode: SharingMode
    params: ModelParams | dict[Task, ModelParams]
    masks: dict[Task, list[TaskMask]] | None = None
    best_i: dict[Task, int] | None = None
    history: list[dict] = field(default_factory=list)

    def best_mask(self, task: Task) -> TaskMask | None:
        if self.masks is None:
            return None
        return self.masks[Task(task)][self.best_i[Task(task)]]

    def params_for(self, task: Task) -> ModelParams:
        if isinstance(self.params, dict):
            return self.params[Task(task)]
        return self.params

    def predictions(self, cfg: ModelConfig, task: Task, ids: np.ndarray) -> np.ndarray:
        return predict(self.params_for(task), cfg, task, ids,
                       mask=self.best_mask(task))


def joint_train(params: ModelParams, best_masks: dict[Task, TaskMask],
                dataset: Dataset, cfg: ModelConfig, tcfg: TrainConfig,
                history: list | None = None,
                step_hook=None) -> None:
    """Algorithm step 3: from the snapshot, alternate masked updates so each
    task trains only its subnetwork; overlap weights are trained by both."""
    for task in TASKS:
        if task not in best_masks:
            raise StateError(f"joint_train: missing best mask for task {task.value}")
    params.rewind()
    opt = nn.Adam(params.blocks(), tcfg.learning_rate)
    for epoch in range(tcfg.joint_epochs):
        total, count = 0.0, 0
        for batch in batches(dataset, TASKS, tcfg.batch_size, tcfg.seed,
                             _JOINT_EPOCH_BASE + epoch):
            loss = _train_step(params, cfg, tcfg, opt, batch,
                               best_masks[batch.task], tcfg.omega(batch.task))
            total += loss
            count += 1
            if step_hook is not None:
                step_hook(batch, params)
        if history is not None:
            history.append({"stage": "joint", "epoch": epoch,
                            "mean_loss": total / max(count, 1)})


def train_baseline(dataset: Dataset, cfg: ModelConfig,
                   tcfg: TrainConfig) -> TrainedArtifacts:
    """single_task: two independent nets, one per task, each on its own
    samples. layer_share: shared embeddings + trunk with per-task towers."""
    mode = cfg.sharing_mode
    history: list[dict] = []
    if mode is SharingMode.SINGLE_TASK:
        per_task: dict[Task, ModelParams] = {}
        for ti, task in enumerate(TASKS):
            if dataset.task(task).n == 0:
                raise ConfigError(f"train_baseline: no samples for task {task.value}")
            p = model.init_params(cfg, tcfg.seed + ti)
            opt = nn.Adam(p.blocks(), tcfg.learning_rate)
            for epoch in range(tcfg.joint_epochs):
                total, count = 0.0, 0
                for batch in batches(dataset, [task], tcfg.batch_size, tcfg.seed,
                                     _BASELINE_EPOCH_BASE + epoch):
                    total += _train_step(p, cfg, tcfg, opt, batch, None, 1.0)
                    count += 1
                history.append({"stage": "single", "task": task.value,
                                "epoch": epoch, "mean_loss": total / max(count, 1)})
            per_task[task] = p
        return TrainedArtifacts(mode, per_task, history=history)
    if mode is SharingMode.LAYER_SHARE:
        p = model.init_params(cfg, tcfg.seed)
        opt = nn.Adam(p.blocks(), tcfg.learning_rate)
        for epoch in range(tcfg.joint_epochs):
            total, count = 0.0, 0
            for batch in batches(dataset, TASKS, tcfg.batch_size, tcfg.seed,
                                 _BASELINE_EPOCH_BASE + epoch):
                total += _train_step(p, cfg, tcfg, opt, batch, None,
                                     tcfg.omega(batch.task))
                count += 1
            history.append({"stage": "layer_share", "epoch": epoch,
                            "mean_loss": total / max(count, 1)})
        return TrainedArtifacts(mode, p, history=history)
    raise ConfigError(f"train_baseline: mode {mode.value} is not a baseline")


def train_model(dataset: Dataset, cfg: ModelConfig, tcfg: TrainConfig) -> TrainedArtifacts:
    """End-to-end training for any sharing mode."""
    if cfg.sharing_mode is not tcfg.sharing_mode:
        raise ConfigError("model and train configs disagree on sharing mode")
    mode = cfg.sharing_mode
    if mode in (SharingMode.SINGLE_TASK, SharingMode.LAYER_SHARE):
        return train_baseline(dataset, cfg, tcfg)
    history: list[dict] = []
    params = model.init_params(cfg, tcfg.seed)
    warmup(params, dataset, cfg, tcfg, history)
    masks, best_i = generate_masks(params, dataset, cfg, tcfg, history)
    best = {t: masks[t][best_i[t]] for t in TASKS}
    joint_train(params, best, dataset, cfg, tcfg, history)
    return TrainedArtifacts(mode, params, masks=masks, best_i=best_i,
                            history=history)


def evaluate_artifacts(art: TrainedArtifacts, dataset: Dataset, cfg: ModelConfig,
                       split: str = "test") -> dict[str, float]:
    out = {}
    for task in TASKS:
        ids, labels = dataset.subset(task, split)
        if len(labels) == 0:
            continue
        score = evaluate(art.params_for(task), cfg, task, ids, labels,
                         mask=art.best_mask(task))
        key = "ctr_auc" if task is Task.CTR else "cvr_mse"
        out[key] = score
    return out
