"""Encoder, classification heads, episodic loss, and checkpointing.

A model is a named map of tensors (`ModelParams`) plus static structure
(`ModelConfig`, `HeadKind`).  Heads turn support features into query
logits; all of them, and the encoder, are differentiable with respect to
parameters and raw input pixels, which is what lets the ascent loop in
`taskaug.augment` climb the loss surface over task images.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from taskaug import tensor as T
from taskaug.tasks import Task
from taskaug.tensor import ShapeError, Tensor

HEAD_KINDS = ("prototypical", "relation", "label_propagation", "uniform_random")

_CKPT_MAGIC = b"TAUGCKPT"


@dataclass(frozen=True)
class ModelConfig:
    """Static encoder structure; three conv blocks, each halving H and W."""

    in_channels: int = 3
    image_size: int = 16
    conv_channels: tuple[int, int, int] = (32, 64, 64)

    def __post_init__(self) -> None:
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8 (three 2x poolings)")
        if self.in_channels < 1 or len(self.conv_channels) != 3:
            raise ValueError("need in_channels >= 1 and exactly three conv widths")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1] * (self.image_size // 8) ** 2


@dataclass(frozen=True)
class HeadKind:
    """Which inductive bias maps a support set to query logits.

    `alpha`/`sigma`/`k_neighbors` configure label propagation (k_neighbors
    None keeps the full graph); `hidden` sizes the relation comparator;
    `noise_seed` drives the uniform_random diagnostic head.
    """

    kind: str = "prototypical"
    alpha: float = 0.99
    sigma: float = 1.0
    k_neighbors: int | None = None
    hidden: int = 64
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind '{self.kind}', expected one of {HEAD_KINDS}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.k_neighbors is not None and self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive or None")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")


@dataclass
class ModelParams:
    """All trainable tensors of encoder plus head, keyed by stable names."""

    config: ModelConfig
    head: HeadKind
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def items(self):
        return self.tensors.items()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def clone(self) -> "ModelParams":
        copies = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self.tensors.items()
        }
        return ModelParams(self.config, self.head, copies)


def init_params(config: ModelConfig, head: HeadKind, seed: int = 0) -> ModelParams:
    """Fresh parameters; conv kernels use He-normal scaling, the relation
    comparator uses Xavier-normal, biases start at zero."""
    tensors: dict[str, Tensor] = {}
    widths = (config.in_channels,) + config.conv_channels
    for i in range(3):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        fan_in = widths[i] * 9
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(widths[i + 1], widths[i], 3, 3))
        tensors[f"conv{i + 1}"] = Tensor(kernel, requires_grad=True)
    if head.kind == "relation":
        d = config.feature_dim
        rng = np.random.default_rng(np.random.SeedSequence((seed, 100)))
        w1 = rng.normal(0.0, np.sqrt(2.0 / (2 * d + head.hidden)), size=(2 * d, head.hidden))
        w2 = rng.normal(0.0, np.sqrt(2.0 / (head.hidden + 1)), size=(head.hidden, 1))
        tensors["rel_w1"] = Tensor(w1, requires_grad=True)
        tensors["rel_b1"] = Tensor(np.zeros(head.hidden), requires_grad=True)
        tensors["rel_w2"] = Tensor(w2, requires_grad=True)
        tensors["rel_b2"] = Tensor(np.zeros(1), requires_grad=True)
    return ModelParams(config, head, tensors)


def encode(params: ModelParams, images: Tensor) -> Tensor:
    """Map (N, Ch, H, W) images to (N, D) features.

    Output is scaled by 1/sqrt(D) so pairwise feature distances stay O(1)
    regardless of the flattened width.
    """
    cfg = params.config
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if images.data.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"expected images shaped (N, {expected[0]}, {expected[1]}, {expected[2]}), got {images.shape}")
    if images.shape[0] == 0:
        raise ShapeError("empty image batch")
    h = images
    for i in range(3):
        h = T.conv2d(h, params[f"conv{i + 1}"], stride=1, padding=1)
        h = T.relu(h)
        h = T.max_pool2d(h, window=2, stride=2)
    n = h.shape[0]
    d = cfg.feature_dim
    return T.scale(T.reshape(h, (n, d)), 1.0 / np.sqrt(d))


def _class_indicator(support_y: np.ndarray, way: int) -> np.ndarray:
    counts = np.bincount(support_y, minlength=way)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"class {missing} has no support samples")
    onehot = np.zeros((way, len(support_y)))
    onehot[support_y, np.arange(len(support_y))] = 1.0
    return onehot / counts[:, None]


def class_prototypes(support_f: Tensor, support_y: np.ndarray, way: int) -> Tensor:
    """Per-class mean of support features, shape (way, D)."""
    return T.matmul(Tensor(_class_indicator(support_y, way)), support_f)


def prototypical_logits(
    support_f: Tensor, support_y: np.ndarray, query_f: Tensor, way: int
) -> Tensor:
    """logit[q, c] = -||query_f[q] - prototype_c||^2."""
    protos = class_prototypes(support_f, support_y, way)
    return T.scale(T.euclidean_pairwise(query_f, protos), -1.0)


def relation_logits(
    params: ModelParams, support_f: Tensor, support_y: np.ndarray, query_f: Tensor, way: int
) -> Tensor:
    """Learned comparator over (prototype, query) feature pairs."""
    protos = class_prototypes(support_f, support_y, way)
    q = query_f.shape[0]
    proto_idx = np.tile(np.arange(way), q)
    query_idx = np.repeat(np.arange(q), way)
    pairs = T.concat([T.take_rows(protos, proto_idx), T.take_rows(query_f, query_idx)], axis=1)
    h = T.relu(T.dense(pairs, params["rel_w1"], params["rel_b1"]))
    scores = T.dense(h, params["rel_w2"], params["rel_b2"])
    return T.reshape(scores, (q, way))


def _knn_mask(affinity: np.ndarray, k: int) -> np.ndarray:
    # keep an edge if either endpoint ranks it among its k strongest
    n = affinity.shape[0]
    keep = np.zeros_like(affinity)
    order = np.argsort(-affinity, axis=1)
    rows = np.repeat(np.arange(n), min(k, n))
    cols = order[:, : min(k, n)].ravel()
    keep[rows, cols] = 1.0
    return np.maximum(keep, keep.T)


def label_propagation_logits(
    head: HeadKind, support_f: Tensor, support_y: np.ndarray, query_f: Tensor, way: int
) -> Tensor:
    """Diffuse support labels over a Gaussian affinity graph of all episode
    samples; query rows of the closed-form propagation are the logits.

    Affinity W has a zero diagonal; with S the symmetric normalization of W,
    the scores solve (I - alpha*S) F = Y for the onehot support matrix Y.
    """
    n_support = support_f.shape[0]
    all_f = T.concat([support_f, query_f], axis=0)
    n = all_f.shape[0]
    sq_dist = T.euclidean_pairwise(all_f, all_f)
    affinity = T.exp(T.scale(sq_dist, -1.0 / (2.0 * head.sigma**2)))
    if not np.all(np.isfinite(affinity.data)):
        raise ValueError("non-finite affinities in label propagation")
    off_diag = 1.0 - np.eye(n)
    if head.k_neighbors is not None:
        off_diag = off_diag * _knn_mask(affinity.data * off_diag, head.k_neighbors)
    w = T.mul(affinity, Tensor(off_diag))
    degree = T.reduce_sum(w, axis=1)
    inv_root = T.exp(T.scale(T.log(degree), -0.5))
    s = T.mul(T.mul(w, T.reshape(inv_root, (n, 1))), T.reshape(inv_root, (1, n)))
    a = T.sub(Tensor(np.eye(n)), T.scale(s, head.alpha))
    y = np.zeros((n, way))
    y[np.arange(n_support), support_y] = 1.0
    scores = T.linear_solve(a, Tensor(y))
    return T.take_rows(scores, np.arange(n_support, n))


def uniform_random_logits(head: HeadKind, task: Task) -> Tensor:
    """Diagnostic head: logits drawn uniformly, deterministic in the query
    pixels and `noise_seed`, so evaluation statistics are reproducible."""
    digest = zlib.crc32(task.query_x.data.tobytes())
    rng = np.random.default_rng(np.random.SeedSequence((head.noise_seed, digest)))
    return Tensor(rng.uniform(size=(task.query_count, task.way)))


def episode_logits(params: ModelParams, head: HeadKind, task: Task) -> Tensor:
    """Query logits for one episode under the given head."""
    if head.kind == "uniform_random":
        return uniform_random_logits(head, task)
    n_support = task.support_x.shape[0]
    features = encode(params, T.concat([task.support_x, task.query_x], axis=0))
    support_f = T.take_rows(features, np.arange(n_support))
    query_f = T.take_rows(features, np.arange(n_support, n_support + task.query_count))
    if head.kind == "prototypical":
        return prototypical_logits(support_f, task.support_y, query_f, task.way)
    if head.kind == "relation":
        return relation_logits(params, support_f, task.support_y, query_f, task.way)
    return label_propagation_logits(head, support_f, task.support_y, query_f, task.way)


def meta_loss(params: ModelParams, head: HeadKind, task: Task) -> Tensor:
    """Cross-entropy of the head's query logits against query labels."""
    return T.softmax_cross_entropy(episode_logits(params, head, task), task.query_y)


def episode_accuracy(params: ModelParams, head: HeadKind, task: Task) -> float:
    """Fraction of queries whose argmax logit (lowest index on ties) is
    the true label."""
    logits = episode_logits(params, head, task)
    return float(np.mean(np.argmax(logits.data, axis=1) == task.query_y))


# ---------------------------------------------------------------------------
# Checkpoints: one file, JSON manifest followed by a float64 blob


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    names = sorted(params.tensors)
    entries, blobs, offset = [], [], 0
    for name in names:
        data = np.ascontiguousarray(params.tensors[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    manifest = {
        "config": dataclasses.asdict(params.config),
        "head": dataclasses.asdict(params.head),
        "dtype": "<f8",
        "tensors": entries,
    }
    body = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode())
        blob = fh.read()
    raw_cfg = dict(manifest["config"])
    raw_cfg["conv_channels"] = tuple(raw_cfg["conv_channels"])
    config = ModelConfig(**raw_cfg)
    head = HeadKind(**manifest["head"])
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        data = np.frombuffer(blob, dtype=manifest["dtype"], count=count, offset=start)
        tensors[entry["name"]] = Tensor(data.reshape(shape).copy(), requires_grad=True)
    return ModelParams(config, head, tensors)
