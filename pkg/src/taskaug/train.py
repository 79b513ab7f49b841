"""Training and evaluation procedures: encoder pre-training, episodic
meta-training with the adversarial task loop, confidence-interval
evaluation, and the per-task fine-tuning comparison protocols.

Every procedure is deterministic given (seed, config).  Random decisions
draw from purpose-separated streams (episodes, augmentation, validation,
...), so turning the augmentation off leaves the episode stream, and
therefore the parameter trajectory, untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from taskaug import tensor as T
from taskaug.augment import AugmentConfig, apply_random_convolution, ascend_task
from taskaug.models import (
    HeadKind,
    ModelConfig,
    ModelParams,
    encode,
    episode_accuracy,
    init_params,
    meta_loss,
)
from taskaug.tasks import DatasetHandle, Task, sample_episode
from taskaug.tensor import Adam, SGDMomentum, Tape, Tensor, backward, make_optimizer

# purpose tags for seed streams; keeping them distinct means disabling one
# consumer never shifts another's draws
_STREAM_EPISODES = 1
_STREAM_AUGMENT = 2
_STREAM_VALIDATION = 3
_STREAM_PRETRAIN = 4
_STREAM_FINETUNE = 5
_STREAM_HEAD_INIT = 6


def episode_seed_stream(seed: int) -> np.random.Generator:
    """The stream of per-iteration episode seeds used by meta_train."""
    return np.random.default_rng(np.random.SeedSequence((seed, _STREAM_EPISODES)))


def next_seed(gen: np.random.Generator) -> int:
    return int(gen.integers(0, 2**63))


def derive_eval_seed(seed: int, index: int) -> int:
    """Per-episode evaluation seed, independent of evaluation order."""
    return int(np.random.SeedSequence((seed, index)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    """Procedure knobs for pre-training, meta-training, and evaluation."""

    iterations: int = 600
    outer_lr: float = 0.001
    optimizer: str = "adam"
    momentum: float = 0.9
    way: int = 5
    shot: int = 1
    train_queries: int = 8
    eval_queries: int = 16
    eval_episodes: int = 2000
    val_every: int = 100
    val_episodes: int = 100
    pretrain_epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadKind = field(default_factory=HeadKind)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.outer_lr <= 0:
            raise ValueError("outer_lr must be positive")
        if self.iterations < 0 or self.eval_episodes < 1:
            raise ValueError("iterations must be >= 0 and eval_episodes >= 1")
        if min(self.way, self.shot, self.train_queries, self.eval_queries) < 1:
            raise ValueError("way/shot/query settings must be positive")
        if self.val_every < 1 or self.val_episodes < 1:
            raise ValueError("validation cadence fields must be positive")
        if self.pretrain_epochs < 1 or self.batch_size < 1:
            raise ValueError("pretrain_epochs and batch_size must be positive")


@dataclass
class EvalReport:
    """Episode-level accuracy summary.

    ci95_halfwidth is 1.96 times the sample standard deviation (ddof=1)
    of per-episode accuracies divided by sqrt(episodes); zero when fewer
    than two episodes were run.
    """

    episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode_accuracies: np.ndarray

    def __post_init__(self) -> None:
        self.per_episode_accuracies = np.asarray(self.per_episode_accuracies, dtype=np.float64)
        if self.episodes != len(self.per_episode_accuracies):
            raise ValueError("episode count does not match the accuracy array")
        if not np.isclose(self.mean_accuracy, self.per_episode_accuracies.mean(), atol=1e-12):
            raise ValueError("mean_accuracy does not match the accuracy array")

    @classmethod
    def from_accuracies(cls, accs: np.ndarray) -> "EvalReport":
        accs = np.asarray(accs, dtype=np.float64)
        n = len(accs)
        ci = 1.96 * accs.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        return cls(n, float(accs.mean()), float(ci), accs)


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the last good params."""

    def __init__(self, message: str, last_good: ModelParams):
        super().__init__(message)
        self.last_good = last_good


def ensure_head_params(params: ModelParams, head: HeadKind, seed: int = 0) -> ModelParams:
    """Clone `params` re-targeted at `head`, initializing any head tensors
    the source does not carry (e.g. pretrained encoder -> relation head)."""
    fresh = init_params(params.config, head, seed=_mix_seed(seed, _STREAM_HEAD_INIT))
    for name, t in params.items():
        if name in fresh.tensors:
            fresh.tensors[name] = Tensor(t.data.copy(), requires_grad=True)
    return fresh


def _mix_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Pre-training


def _pretrain_full(
    data: DatasetHandle, cfg: TrainConfig
) -> tuple[ModelParams, Tensor, Tensor, list[float]]:
    if data.class_count < 2:
        raise ValueError("pre-training needs at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _STREAM_PRETRAIN)))
    params = init_params(cfg.model, HeadKind(), seed=_mix_seed(cfg.seed, _STREAM_PRETRAIN))
    d = cfg.model.feature_dim
    c = data.class_count
    fc_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / (d + c)), size=(d, c)), requires_grad=True)
    fc_b = Tensor(np.zeros(c), requires_grad=True)
    bag = dict(params.tensors)
    bag["fc_w"], bag["fc_b"] = fc_w, fc_b

    x_all = np.concatenate(data.images, axis=0)
    y_all = np.concatenate([np.full(len(s), i) for i, s in enumerate(data.images)])
    opt = Adam(cfg.outer_lr)
    last_good = params.clone()
    history: list[float] = []
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(x_all))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = Tensor(x_all[idx])
            with Tape():
                logits = T.dense(encode(params, xb), fc_w, fc_b)
                loss = T.softmax_cross_entropy(logits, y_all[idx])
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"pre-training loss became non-finite in epoch {epoch + 1}", last_good
                    )
                backward(loss)
            epoch_losses.append(float(loss.data))
            opt.step(bag)
            # a NaN weight can hide behind a finite loss (relu zeroes NaN
            # activations), so the parameters are checked directly
            if not all(np.isfinite(t.data).all() for t in bag.values()):
                raise TrainingDiverged(
                    f"pre-training parameters became non-finite in epoch {epoch + 1}",
                    last_good,
                )
        history.append(float(np.mean(epoch_losses)))
        last_good = params.clone()
    return params, fc_w, fc_b, history


def pretrain_encoder(data: DatasetHandle, cfg: TrainConfig) -> ModelParams:
    """Train the encoder with a throwaway linear classifier over all classes
    of `data` by mini-batch cross-entropy; returns encoder tensors only.

    Raises TrainingDiverged (carrying the last epoch-end snapshot) if the
    loss turns non-finite.
    """
    params, _, _, _ = _pretrain_full(data, cfg)
    return params


def pretrain_accuracy(params: ModelParams, data: DatasetHandle, fc_w: Tensor, fc_b: Tensor) -> float:
    """Whole-dataset accuracy of an encoder plus linear classifier."""
    x_all = np.concatenate(data.images, axis=0)
    y_all = np.concatenate([np.full(len(s), i) for i, s in enumerate(data.images)])
    logits = T.dense(encode(params, Tensor(x_all)), fc_w, fc_b)
    return float(np.mean(np.argmax(logits.data, axis=1) == y_all))


# ---------------------------------------------------------------------------
# Meta-training


def meta_train(
    source: DatasetHandle,
    init: ModelParams,
    cfg: TrainConfig,
    val_data: DatasetHandle | None = None,
    log_path: str | Path | None = None,
    on_iteration: Callable[[int, ModelParams, dict], None] | None = None,
) -> ModelParams:
    """One-task-per-iteration episodic training with adversarial task
    augmentation.

    Per iteration: sample a source episode; with probability 1 - p restyle
    it by one shared random convolution; run the ascent loop; take one
    optimizer step on the resulting virtual task.  With t_max = 0 and
    p = 1 this reduces exactly to plain episodic training on the same
    episode seed stream.

    Returns the parameters with the best validation accuracy when
    `val_data` is given (checked every `val_every` iterations), else the
    final parameters.  `on_iteration(it, params, record)` fires after
    every optimizer step with the logged record.
    """
    if cfg.iterations == 0:
        return init
    params = init
    head = params.head
    opt = make_optimizer(cfg.optimizer, cfg.outer_lr, cfg.momentum)
    episode_rng = episode_seed_stream(cfg.seed)
    aug_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _STREAM_AUGMENT)))
    best: ModelParams | None = None
    best_acc = -1.0
    log_fh = open(log_path, "a") if log_path else None
    try:
        for it in range(1, cfg.iterations + 1):
            task = sample_episode(
                source, cfg.way, cfg.shot, cfg.train_queries, next_seed(episode_rng)
            )
            if aug_rng.random() >= cfg.augment.p:
                task = apply_random_convolution(
                    task, cfg.augment.filter_pool, next_seed(aug_rng)
                )
            trace: list | None = [] if cfg.augment.t_max > 0 else None
            task = ascend_task(params, head, task, cfg.augment, trace=trace)
            with Tape():
                loss = meta_loss(params, head, task)
                backward(loss)
            opt.step(params)
            loss_after = float(loss.data)
            record = {
                "iteration": it,
                "loss_before_ascent": trace[0] if trace else loss_after,
                "loss_after_ascent": loss_after,
            }
            if val_data is not None and it % cfg.val_every == 0:
                report = evaluate(
                    params,
                    head,
                    val_data,
                    episodes=cfg.val_episodes,
                    way=cfg.way,
                    shot=cfg.shot,
                    queries_per_class=cfg.eval_queries,
                    seed=_mix_seed(cfg.seed, _STREAM_VALIDATION) + it,
                )
                record["val_accuracy"] = report.mean_accuracy
                if report.mean_accuracy > best_acc:
                    best_acc = report.mean_accuracy
                    best = params.clone()
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if on_iteration is not None:
                on_iteration(it, params, record)
    finally:
        if log_fh is not None:
            log_fh.close()
    return best if best is not None else params


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(
    params: ModelParams,
    head: HeadKind,
    data: DatasetHandle,
    episodes: int,
    way: int,
    shot: int,
    queries_per_class: int,
    seed: int,
) -> EvalReport:
    """Score `episodes` freshly sampled episodes; deterministic given seed.

    Episode i draws from a seed derived from (seed, i), so results do not
    depend on evaluation order.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    accs = np.empty(episodes)
    for i in range(episodes):
        task = sample_episode(data, way, shot, queries_per_class, derive_eval_seed(seed, i))
        accs[i] = episode_accuracy(params, head, task)
    return EvalReport.from_accuracies(accs)


# ---------------------------------------------------------------------------
# Pseudo-sample pipeline for the fine-tuning comparison


def _resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    ch, h, w = img.shape
    ys = np.clip((np.arange(out_size) + 0.5) * h / out_size - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_size) + 0.5) * w / out_size - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bottom = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return out


def augment_image(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One pseudo sample: random crop (side fraction 0.7-1.0) resized back,
    horizontal flip (p=0.5), brightness and contrast jitter, clipped."""
    ch, h, w = img.shape
    side = int(round(rng.uniform(0.7, 1.0) * h))
    side = max(1, min(side, h))
    top = rng.integers(0, h - side + 1)
    left = rng.integers(0, w - side + 1)
    out = _resize_bilinear(img[:, top : top + side, left : left + side], h)
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    out = out + rng.uniform(-0.2, 0.2)
    out = 0.5 + rng.uniform(0.8, 1.2) * (out - 0.5)
    return np.clip(out, 0.0, 1.0)


def make_pseudo_samples(
    support_x: np.ndarray,
    support_y: np.ndarray,
    way: int,
    per_class: int,
    rng: np.random.Generator,
    augment_fn: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """way * per_class augmented copies of support images, class-balanced."""
    fn = augment_fn if augment_fn is not None else augment_image
    xs, ys = [], []
    for c in range(way):
        pool = support_x[support_y == c]
        for _ in range(per_class):
            base = pool[rng.integers(len(pool))]
            xs.append(fn(base, rng))
            ys.append(c)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


@dataclass
class FinetuneResult:
    """Outcome of one per-task adaptation run, with protocol counters."""

    accuracy: float
    epochs_run: int
    pseudo_per_epoch: int
    support_count: int
    optimizer: str
    lr: float
    momentum: float
    loss_curve: list[float]

    @property
    def pseudo_total(self) -> int:
        return self.epochs_run * self.pseudo_per_epoch


def _default_epochs(shot: int) -> int:
    # 30 epochs for 1-shot tasks, 50 for larger shots
    return 30 if shot == 1 else 50


def finetune_baseline(
    encoder: ModelParams,
    task: Task,
    pseudo_per_class: int = 15,
    epochs: int | None = None,
    lr: float = 0.01,
    momentum: float = 0.9,
    seed: int = 0,
    augment_fn: Callable | None = None,
) -> FinetuneResult:
    """Adapt a pre-trained encoder plus a fresh linear head to one task.

    Each epoch regenerates way * pseudo_per_class pseudo samples from the
    support set and takes one SGD-with-momentum step on support + pseudo
    samples.  Query labels are touched only by the final accuracy
    computation.
    """
    if epochs is None:
        epochs = _default_epochs(task.shot)
    rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_FINETUNE)))
    work = encoder.clone()
    d = work.config.feature_dim
    fc_w = Tensor(
        rng.normal(0.0, np.sqrt(2.0 / (d + task.way)), size=(d, task.way)), requires_grad=True
    )
    fc_b = Tensor(np.zeros(task.way), requires_grad=True)
    bag = dict(work.tensors)
    bag["fc_w"], bag["fc_b"] = fc_w, fc_b
    opt = SGDMomentum(lr, momentum)

    sup_x, sup_y = task.support_x.data, task.support_y
    losses: list[float] = []
    per_epoch = task.way * pseudo_per_class
    for _ in range(epochs):
        px, py = make_pseudo_samples(sup_x, sup_y, task.way, pseudo_per_class, rng, augment_fn)
        assert len(px) == per_epoch
        xb = Tensor(np.concatenate([sup_x, px]))
        yb = np.concatenate([sup_y, py])
        with Tape():
            logits = T.dense(encode(work, xb), fc_w, fc_b)
            loss = T.softmax_cross_entropy(logits, yb)
            backward(loss)
        losses.append(float(loss.data))
        opt.step(bag)

    query_logits = T.dense(encode(work, task.query_x), fc_w, fc_b)
    accuracy = float(np.mean(np.argmax(query_logits.data, axis=1) == task.query_y))
    return FinetuneResult(
        accuracy=accuracy,
        epochs_run=epochs,
        pseudo_per_epoch=per_epoch,
        support_count=len(sup_y),
        optimizer="sgd_momentum",
        lr=lr,
        momentum=momentum,
        loss_curve=losses,
    )


def adapt_meta_finetune(
    params: ModelParams,
    head: HeadKind,
    task: Task,
    pseudo_per_class: int = 15,
    epochs: int | None = None,
    lr: float = 0.001,
    seed: int = 0,
    augment_fn: Callable | None = None,
) -> FinetuneResult:
    """Adapt a meta-learner to one task: each epoch builds a pseudo query
    set from augmented support copies and takes one Adam step on the
    episodic loss (true support, pseudo queries).  Scores true queries."""
    if epochs is None:
        epochs = _default_epochs(task.shot)
    rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_FINETUNE)))
    work = params.clone()
    opt = Adam(lr)
    per_epoch = task.way * pseudo_per_class
    losses: list[float] = []
    for _ in range(epochs):
        px, py = make_pseudo_samples(
            task.support_x.data, task.support_y, task.way, pseudo_per_class, rng, augment_fn
        )
        pseudo_task = Task(
            support_x=Tensor(task.support_x.data.copy()),
            support_y=task.support_y.copy(),
            query_x=Tensor(px),
            query_y=py,
            way=task.way,
            shot=task.shot,
            query_count=per_epoch,
        )
        with Tape():
            loss = meta_loss(work, head, pseudo_task)
            backward(loss)
        losses.append(float(loss.data))
        opt.step(work)
    accuracy = episode_accuracy(work, head, task)
    return FinetuneResult(
        accuracy=accuracy,
        epochs_run=epochs,
        pseudo_per_epoch=per_epoch,
        support_count=len(task.support_y),
        optimizer="adam",
        lr=lr,
        momentum=0.0,
        loss_curve=losses,
    )
