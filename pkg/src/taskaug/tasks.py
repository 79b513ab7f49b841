"""Few-shot tasks, episode sampling, and a synthetic cross-domain benchmark.

A task is one C-way K-shot classification episode.  Tasks can also be
viewed as a single flat vector (samples interleaved with their labels),
which is the representation the adversarial ascent perturbs.

The synthetic benchmark renders each class as a (shape, texture, palette)
combination.  Domain shift is a pixel-level transform applied uniformly
to every image of a domain: hue rotation, texture reassignment, box blur,
channel permutation, or contrast change.  Neutral shift values are exact
no-ops, so a spec with all shifts neutral reproduces the source domain
byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from taskaug.tensor import ShapeError, Tensor

# ---------------------------------------------------------------------------
# Task containers


@dataclass
class Task:
    """One episode: labeled support set plus a query set to classify."""

    support_x: Tensor
    support_y: np.ndarray
    query_x: Tensor
    query_y: np.ndarray
    way: int
    shot: int
    query_count: int

    def __post_init__(self) -> None:
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_y = np.asarray(self.query_y, dtype=np.int64)
        if self.support_x.data.ndim != 4 or self.query_x.data.ndim != 4:
            raise ShapeError("task images must be (N, Ch, H, W)")
        if self.support_x.shape[1:] != self.query_x.shape[1:]:
            raise ShapeError("support and query images must share Ch, H, W")
        if self.support_x.shape[0] != self.way * self.shot:
            raise ShapeError(
                f"expected {self.way * self.shot} support images, got {self.support_x.shape[0]}"
            )
        counts = np.bincount(self.support_y, minlength=self.way)
        if len(self.support_y) != self.way * self.shot or np.any(counts != self.shot):
            raise ShapeError("support set must hold exactly `shot` samples of each class")
        if self.query_x.shape[0] != self.query_count or len(self.query_y) != self.query_count:
            raise ShapeError(f"expected {self.query_count} query images")
        for name, labels in (("support", self.support_y), ("query", self.query_y)):
            if labels.size and (labels.min() < 0 or labels.max() >= self.way):
                raise ShapeError(f"{name} labels must lie in [0, {self.way})")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.support_x.shape[1:]

    def layout(self) -> TaskLayout:
        ch, h, w = self.image_shape
        return TaskLayout(self.way, self.shot, self.query_count, ch, h, w)


@dataclass(frozen=True)
class TaskLayout:
    """Dimension record needed to flatten a task and to rebuild it."""

    way: int
    shot: int
    query_count: int
    channels: int
    height: int
    width: int

    @property
    def sample_size(self) -> int:
        return self.channels * self.height * self.width

    @property
    def vector_length(self) -> int:
        n = self.way * self.shot + self.query_count
        return n * (self.sample_size + 1)


@dataclass
class TaskVector:
    """Flat view of a task: [x_1, y_1, ..., x_N, y_N], support first."""

    data: np.ndarray
    layout: TaskLayout

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.layout.vector_length:
            raise ShapeError(
                f"vector length {self.data.size} does not match layout "
                f"(expected {self.layout.vector_length})"
            )


def task_to_vector(task: Task) -> TaskVector:
    """Flatten a task into one vector, each sample followed by its label."""
    layout = task.layout()
    blocks = []
    for images, labels in ((task.support_x, task.support_y), (task.query_x, task.query_y)):
        flat = images.data.reshape(images.shape[0], -1)
        blocks.append(np.concatenate([flat, labels[:, None].astype(np.float64)], axis=1))
    return TaskVector(np.concatenate(blocks, axis=0).ravel(), layout)


def vector_to_task(vec: TaskVector) -> Task:
    """Rebuild a task from its flat vector form."""
    lay = vec.layout
    n_support = lay.way * lay.shot
    rows = vec.data.reshape(n_support + lay.query_count, lay.sample_size + 1)
    images = rows[:, :-1].reshape(-1, lay.channels, lay.height, lay.width)
    labels = np.rint(rows[:, -1]).astype(np.int64)
    return Task(
        support_x=Tensor(images[:n_support].copy()),
        support_y=labels[:n_support],
        query_x=Tensor(images[n_support:].copy()),
        query_y=labels[n_support:],
        way=lay.way,
        shot=lay.shot,
        query_count=lay.query_count,
    )


# ---------------------------------------------------------------------------
# Datasets and episode sampling


@dataclass
class DatasetHandle:
    """Immutable class-indexed image collection; one list of images per class."""

    images: list[np.ndarray]  # images[c] has shape (n_c, Ch, H, W)
    class_names: list[str]
    split: str = "train"

    def __post_init__(self) -> None:
        if len(self.images) != len(self.class_names):
            raise ShapeError("one name per class required")
        if not self.images:
            raise ValueError("dataset must hold at least one class")

    @property
    def class_count(self) -> int:
        return len(self.images)


def sample_episode(
    data: DatasetHandle,
    way: int,
    shot: int,
    queries_per_class: int,
    rng_seed: int,
    remap_seed: int | None = None,
) -> Task:
    """Draw one episode: `way` classes, `shot` support and `queries_per_class`
    query images per class, all without replacement.

    Class identities are remapped to episode labels 0..way-1 by a seeded
    permutation.  `remap_seed`, when given, controls only that permutation;
    by default it comes from the same stream as the rest of the draw.
    """
    if way < 1 or shot < 1 or queries_per_class < 1:
        raise ValueError("way, shot, and queries_per_class must be positive")
    if data.class_count < way:
        raise ValueError(f"dataset has {data.class_count} classes, episode needs {way}")
    need = shot + queries_per_class
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    chosen = rng.choice(data.class_count, size=way, replace=False)
    for c in chosen:
        if len(data.images[c]) < need:
            raise ValueError(
                f"class '{data.class_names[c]}' has {len(data.images[c])} images, "
                f"episode needs {need}"
            )
    if remap_seed is None:
        labels = rng.permutation(way)
    else:
        labels = np.random.default_rng(np.random.SeedSequence(remap_seed)).permutation(way)

    support, query = [], []
    support_y = np.empty(way * shot, dtype=np.int64)
    query_y = np.empty(way * queries_per_class, dtype=np.int64)
    for i, c in enumerate(chosen):
        picks = rng.choice(len(data.images[c]), size=need, replace=False)
        support.append(data.images[c][picks[:shot]])
        query.append(data.images[c][picks[shot:]])
        support_y[i * shot : (i + 1) * shot] = labels[i]
        query_y[i * queries_per_class : (i + 1) * queries_per_class] = labels[i]
    return Task(
        support_x=Tensor(np.concatenate(support, axis=0)),
        support_y=support_y,
        query_x=Tensor(np.concatenate(query, axis=0)),
        query_y=query_y,
        way=way,
        shot=shot,
        query_count=way * queries_per_class,
    )


# ---------------------------------------------------------------------------
# Synthetic domain renderer

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "diamond", "bar", "saltire")
TEXTURE_NAMES = ("solid", "stripes", "checker", "dots")

# (foreground RGB, background RGB); one palette per class so color alone
# separates every pair of classes in the unshifted domain
PALETTES = (
    ((0.92, 0.12, 0.12), (0.16, 0.16, 0.42)),
    ((0.95, 0.55, 0.10), (0.10, 0.32, 0.30)),
    ((0.90, 0.88, 0.12), (0.30, 0.12, 0.38)),
    ((0.15, 0.78, 0.22), (0.40, 0.16, 0.12)),
    ((0.12, 0.80, 0.80), (0.38, 0.26, 0.10)),
    ((0.18, 0.32, 0.92), (0.70, 0.60, 0.35)),
    ((0.58, 0.18, 0.85), (0.14, 0.40, 0.18)),
    ((0.92, 0.20, 0.62), (0.12, 0.35, 0.45)),
)


@dataclass(frozen=True)
class DomainSpec:
    """Full recipe for one synthetic domain; equal specs render equal pixels."""

    class_count: int = 8
    image_size: int = 16
    noise_level: float = 0.05
    # shift parameters; the defaults are exact no-ops
    hue_rotation_deg: float = 0.0
    texture_swap: bool = False
    blur_radius: int = 0
    channel_permutation: tuple[int, int, int] = (0, 1, 2)
    contrast_factor: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.class_count <= 32:
            # beyond 32 the (shape, texture, palette) identity space repeats
            raise ValueError("class_count must be between 1 and 32")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if sorted(self.channel_permutation) != [0, 1, 2]:
            raise ValueError("channel_permutation must be a permutation of (0, 1, 2)")
        if self.blur_radius < 0 or self.noise_level < 0 or self.contrast_factor <= 0:
            raise ValueError("blur_radius/noise_level must be >= 0, contrast_factor > 0")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DomainSpec":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown DomainSpec fields: {sorted(unknown)}")
        if "channel_permutation" in raw:
            raw["channel_permutation"] = tuple(raw["channel_permutation"])
        return cls(**raw)


def _class_identity(spec: DomainSpec, class_idx: int) -> tuple[int, int, int]:
    """(shape, texture, palette) indices for one class.

    Shape and palette are unique per class (up to 8 classes), so both color
    and shape separate every class pair; texture repeats every 4 classes and
    is only a partial cue.  The texture-swap shift re-binds textures to
    classes, the hue shift moves the palettes; shape survives every shift.
    """
    shape_idx = class_idx % len(SHAPE_NAMES)
    texture_idx = (class_idx + class_idx // len(SHAPE_NAMES)) % len(TEXTURE_NAMES)
    palette_idx = class_idx % len(PALETTES)
    if spec.texture_swap:
        texture_idx = (texture_idx + 1) % len(TEXTURE_NAMES)
    return shape_idx, texture_idx, palette_idx


def _shape_mask(shape_idx: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    name = SHAPE_NAMES[shape_idx]
    if name == "disk":
        return u * u + v * v <= 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if name == "triangle":
        return (v <= 0.75) & (np.abs(u) <= (v + 1.0) * 0.55)
    if name == "cross":
        box = np.maximum(np.abs(u), np.abs(v)) <= 1.0
        return box & ((np.abs(u) <= 0.33) | (np.abs(v) <= 0.33))
    if name == "ring":
        r = np.sqrt(u * u + v * v)
        return (r >= 0.55) & (r <= 1.0)
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1
    if name == "bar":
        return (np.abs(v) <= 0.4) & (np.abs(u) <= 1.0)
    if name == "saltire":
        box = np.maximum(np.abs(u), np.abs(v)) <= 1.0
        return box & ((np.abs(u - v) <= 0.42) | (np.abs(u + v) <= 0.42))
    raise ValueError(f"unknown shape index {shape_idx}")


def _texture_field(texture_idx: int, yy: np.ndarray, xx: np.ndarray, size: int, phase: float) -> np.ndarray:
    name = TEXTURE_NAMES[texture_idx]
    if name == "solid":
        return np.ones_like(yy)
    if name == "stripes":
        wave = np.sin(2.0 * np.pi * ((xx + yy) * size / 4.5 + phase))
        return (wave > 0).astype(np.float64)
    if name == "checker":
        cell = 4.0 * (16.0 / size) if size < 16 else 4.0
        bx = np.floor(xx * size / cell + phase)
        by = np.floor(yy * size / cell + phase)
        return ((bx + by) % 2).astype(np.float64)
    if name == "dots":
        period = 5.0 / size
        dy = (yy + phase * period) % period - period / 2
        dx = (xx + phase * period) % period - period / 2
        return (dy * dy + dx * dx <= (1.8 / size) ** 2).astype(np.float64)
    raise ValueError(f"unknown texture index {texture_idx}")


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    # rotation about the gray axis (1,1,1)/sqrt(3)
    theta = np.deg2rad(degrees)
    u = np.full(3, 1.0 / np.sqrt(3.0))
    k = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.cos(theta) * np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * np.outer(u, u)


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    padded = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
    return windows.mean(axis=(-2, -1))


def _apply_shift(spec: DomainSpec, img: np.ndarray) -> np.ndarray:
    """Post-render domain shift; every neutral parameter is skipped outright."""
    if spec.hue_rotation_deg != 0.0:
        rot = _hue_rotation_matrix(spec.hue_rotation_deg)
        img = np.clip(np.einsum("ij,jhw->ihw", rot, img), 0.0, 1.0)
    if spec.blur_radius > 0:
        img = _box_blur(img, spec.blur_radius)
    if spec.channel_permutation != (0, 1, 2):
        img = img[list(spec.channel_permutation)]
    if spec.contrast_factor != 1.0:
        img = np.clip(0.5 + spec.contrast_factor * (img - 0.5), 0.0, 1.0)
    return img


def render_image(spec: DomainSpec, class_idx: int, image_idx: int) -> np.ndarray:
    """Render one (3, S, S) image in [0, 1], fully determined by its indices."""
    shape_idx, texture_idx, palette_idx = _class_identity(spec, class_idx)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, class_idx, image_idx)))
    size = spec.image_size

    # geometry jitters hard so shape is the costly cue; color jitters less,
    # which makes palettes the path of least resistance for a plain trainer
    cy, cx = 0.5 + rng.uniform(-0.16, 0.16, size=2)
    radius = rng.uniform(0.22, 0.36)
    angle = rng.uniform(-0.5, 0.5)
    phase = rng.uniform(0.0, 1.0)
    fg = np.clip(np.array(PALETTES[palette_idx][0]) + rng.uniform(-0.10, 0.10, 3), 0.0, 1.0)
    bg = np.clip(np.array(PALETTES[palette_idx][1]) + rng.uniform(-0.10, 0.10, 3), 0.0, 1.0)

    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    u = (xx - cx) / radius
    v = (yy - cy) / radius
    ur = np.cos(angle) * u + np.sin(angle) * v
    vr = -np.sin(angle) * u + np.cos(angle) * v

    mask = _shape_mask(shape_idx, ur, vr).astype(np.float64)
    tex = _texture_field(texture_idx, yy, xx, size, phase)
    # texture darkens where the field is zero, strongly on the shape and
    # moderately on the background so it stays a class cue everywhere
    fg_gain = 0.30 + 0.70 * tex
    bg_gain = 0.70 + 0.30 * tex
    img = bg[:, None, None] * (1.0 - mask) * bg_gain + fg[:, None, None] * mask * fg_gain

    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return _apply_shift(spec, img)


def generate_domain(spec: DomainSpec, images_per_class: int, split: str = "train") -> DatasetHandle:
    """Render the whole domain; image j of class c is independent of the total
    count, so growing a domain keeps its existing images."""
    if images_per_class < 1:
        raise ValueError("images_per_class must be positive")
    images, names = [], []
    for c in range(spec.class_count):
        stack = np.stack([render_image(spec, c, j) for j in range(images_per_class)])
        images.append(stack)
        si, ti, pi = _class_identity(spec, c)
        names.append(f"{SHAPE_NAMES[si]}_{TEXTURE_NAMES[ti]}_p{pi}")
    return DatasetHandle(images=images, class_names=names, split=split)


_SPLIT_SEED_OFFSETS = {"train": 0, "val": 1, "test": 2}


def domain_splits(spec: DomainSpec, images_per_class: int) -> dict[str, DatasetHandle]:
    """Train/val/test handles for one domain, rendered from disjoint seed
    streams so the splits never share an image."""
    out = {}
    for split, offset in _SPLIT_SEED_OFFSETS.items():
        shifted = dataclasses.replace(spec, seed=spec.seed * 1000 + offset)
        out[split] = generate_domain(shifted, images_per_class, split=split)
    return out


# ---------------------------------------------------------------------------
# Folder-backed datasets


def load_image_folder(path: str | Path, image_size: int) -> DatasetHandle:
    """Load a `root/<class_name>/<image files>` tree, resized to image_size²
    RGB in [0, 1].  Classes and files are taken in sorted name order."""
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subdirectories under {root}")
    images, names = [], []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"empty class directory: {cdir}")
        stack = []
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            except Exception as exc:
                raise ValueError(f"cannot decode image file: {f}") from exc
            stack.append(np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0)
        images.append(np.stack(stack))
        names.append(cdir.name)
    return DatasetHandle(images=images, class_names=names, split=root.name)
