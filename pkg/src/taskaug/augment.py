"""Task-level augmentation: random-convolution restyling and the
adversarial ascent that climbs the episodic loss over raw task pixels.

The ascent treats the whole task (support and query images jointly,
labels frozen) as one flat variable and takes `t_max` raw-gradient steps
of size `beta` uphill.  Model parameters are read-only inside the loop;
each iteration runs on a fresh tape so nothing accumulates across steps.
Pixels are not re-normalized or clipped: the update is the raw gradient
and values may leave [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskaug import tensor as T
from taskaug.models import HeadKind, ModelParams, encode, meta_loss
from taskaug.tasks import Task
from taskaug.tensor import ShapeError, Tape, Tensor, backward

REG_KINDS = ("none", "euclid", "mmd")


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs of the augmentation loop.

    beta: ascent step size; t_max: ascent iterations (0 disables the loop);
    p: probability of keeping the original pixels instead of applying the
    random convolution; filter_pool: candidate odd filter sizes; gamma and
    reg_kind configure the optional distance penalty used by the ablation
    (reg_kind "none" is the main method).
    """

    beta: float = 40.0
    t_max: int = 5
    p: float = 0.6
    filter_pool: tuple[int, ...] = (1, 3, 5, 7, 11, 15)
    gamma: float = 1.0
    reg_kind: str = "none"

    def __post_init__(self) -> None:
        object.__setattr__(self, "filter_pool", tuple(self.filter_pool))
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if not self.filter_pool:
            raise ValueError("filter_pool must not be empty")
        for k in self.filter_pool:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"filter sizes must be odd and >= 1, got {k}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.reg_kind not in REG_KINDS:
            raise ValueError(f"reg_kind must be one of {REG_KINDS}")


def random_convolution(images: Tensor, filter_pool, rng_seed: int) -> Tensor:
    """Restyle a batch with one shared random convolution.

    A single filter size is drawn from the pool and a single Ch->Ch kernel
    from the Xavier normal distribution; the same kernel is applied to all
    images with stride 1 and padding (k-1)/2, so shapes are preserved.
    Differentiable with respect to the images.
    """
    pool = tuple(filter_pool)
    if not pool or any(k < 1 or k % 2 == 0 for k in pool):
        raise ValueError("filter pool must hold odd sizes >= 1")
    if images.data.ndim != 4:
        raise ShapeError("expected images shaped (N, Ch, H, W)")
    ch = images.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    k = int(pool[rng.integers(len(pool))])
    fan = ch * k * k
    std = np.sqrt(2.0 / (fan + fan))
    kernel = Tensor(rng.normal(0.0, std, size=(ch, ch, k, k)))
    return T.conv2d(images, kernel, stride=1, padding=(k - 1) // 2)


def apply_random_convolution(task: Task, filter_pool, rng_seed: int) -> Task:
    """Random convolution over a whole task, the same kernel for every
    support and query image; labels untouched."""
    n_support = task.support_x.shape[0]
    joined = Tensor(
        np.concatenate([task.support_x.data, task.query_x.data], axis=0)
    )
    out = random_convolution(joined, filter_pool, rng_seed).data
    return Task(
        support_x=Tensor(out[:n_support].copy()),
        support_y=task.support_y.copy(),
        query_x=Tensor(out[n_support:].copy()),
        query_y=task.query_y.copy(),
        way=task.way,
        shot=task.shot,
        query_count=task.query_count,
    )


def _task_features(params: ModelParams, support_x: Tensor, query_x: Tensor) -> Tensor:
    return encode(params, T.concat([support_x, query_x], axis=0))


def _feature_distance(f: Tensor, f0: Tensor, kind: str) -> Tensor:
    """Differentiable distance between two feature matrices of equal layout.

    euclid: mean over samples of the squared feature difference.
    mmd: squared norm of the difference of feature means.
    """
    if f.shape != f0.shape:
        raise ShapeError(f"feature layouts differ: {f.shape} vs {f0.shape}")
    diff = T.sub(f, f0)
    if kind == "euclid":
        return T.scale(T.reduce_sum(T.square(diff)), 1.0 / f.shape[0])
    if kind == "mmd":
        return T.reduce_sum(T.square(T.reduce_mean(diff, axis=0)))
    raise ValueError(f"unknown distance kind '{kind}'")


def task_distance(a: Task, b: Task, kind: str, params: ModelParams, head: HeadKind) -> float:
    """Distance between two tasks in the encoder's feature space."""
    if a.image_shape != b.image_shape or a.support_x.shape != b.support_x.shape \
            or a.query_x.shape != b.query_x.shape:
        raise ShapeError("tasks must share their layout")
    fa = _task_features(params, a.support_x, a.query_x)
    fb = _task_features(params, b.support_x, b.query_x)
    return float(_feature_distance(fa, fb, kind).data)


def ascend_task(
    params: ModelParams,
    head: HeadKind,
    task: Task,
    cfg: AugmentConfig,
    trace: list | None = None,
) -> Task:
    """Run `cfg.t_max` gradient-ascent steps on all task pixels.

    Labels are returned byte-identical to the input.  When `cfg.reg_kind`
    is not "none", the climbed objective is loss - gamma * d(T, T0) with
    T0 fixed to the task passed in.  `trace`, when given, collects the
    loss observed at the start of each step (t_max entries).

    Raises RuntimeError naming the step index if a gradient turns
    non-finite.
    """
    if cfg.t_max == 0:
        if trace is not None:
            trace.append(float(meta_loss(params, head, task).data))
        return task

    support = task.support_x.data.copy()
    query = task.query_x.data.copy()
    ref_features = None
    if cfg.reg_kind != "none":
        ref_features = Tensor(
            _task_features(params, Tensor(support.copy()), Tensor(query.copy())).data
        )

    # theta is frozen for the whole loop: flipping requires_grad keeps the
    # backward pass from computing or depositing parameter gradients
    frozen = [t for _, t in params.items() if t.requires_grad]
    for t in frozen:
        t.requires_grad = False
    try:
        for step in range(1, cfg.t_max + 1):
            xs = Tensor(support, requires_grad=True)
            xq = Tensor(query, requires_grad=True)
            current = Task(
                xs, task.support_y, xq, task.query_y, task.way, task.shot, task.query_count
            )
            with Tape():
                objective = meta_loss(params, head, current)
                if trace is not None:
                    trace.append(float(objective.data))
                if ref_features is not None:
                    dist = _feature_distance(
                        _task_features(params, xs, xq), ref_features, cfg.reg_kind
                    )
                    objective = T.sub(objective, T.scale(dist, cfg.gamma))
                backward(objective)
            for name, grad in (("support", xs.grad), ("query", xq.grad)):
                if grad is None or not np.all(np.isfinite(grad)):
                    raise RuntimeError(f"non-finite {name} gradient at ascent step {step}")
            support = support + cfg.beta * xs.grad
            query = query + cfg.beta * xq.grad
    finally:
        for t in frozen:
            t.requires_grad = True

    return Task(
        support_x=Tensor(support),
        support_y=task.support_y.copy(),
        query_x=Tensor(query),
        query_y=task.query_y.copy(),
        way=task.way,
        shot=task.shot,
        query_count=task.query_count,
    )
