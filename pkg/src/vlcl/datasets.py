"""Image datasets, the synthetic fine-grained generator and episodic sampling."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled image collection.

    ``images`` is ``(n, H, W, C)`` float32 in [0, 1].  ``fine_labels`` (optional)
    records the latent sub-category of every image, e.g. the original classes
    before :func:`merge_classes` or the sub-generator of a synthetic image.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    fine_labels: Optional[np.ndarray] = None
    fine_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ConfigError(f"images must be (n, H, W, C), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ConfigError("one label per image required")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ConfigError("labels must lie in [0, num_classes)")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.fine_labels is not None:
            fine = np.asarray(self.fine_labels, dtype=np.int64)
            if fine.shape != labels.shape:
                raise ConfigError("fine_labels must align with labels")
            fine.flags.writeable = False
            object.__setattr__(self, "fine_labels", fine)
            if self.fine_names is not None:
                object.__setattr__(self, "fine_names", tuple(self.fine_names))

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.images.shape[1]), int(self.images.shape[2])

    @property
    def channels(self) -> int:
        return int(self.images.shape[3])

    @cached_property
    def class_indices(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(self.labels == c) for c in range(self.num_classes))

    def subset(self, class_ids: Sequence[int]) -> "Dataset":
        """Keep only ``class_ids`` (in the given order), relabelled densely."""
        class_ids = [int(c) for c in class_ids]
        if len(set(class_ids)) != len(class_ids):
            raise ConfigError("subset class ids must be distinct")
        for c in class_ids:
            if not 0 <= c < self.num_classes:
                raise ConfigError(f"unknown class id {c}")
        remap = {c: i for i, c in enumerate(class_ids)}
        keep = np.flatnonzero(np.isin(self.labels, class_ids))
        labels = np.array([remap[int(l)] for l in self.labels[keep]], dtype=np.int64)
        fine = None if self.fine_labels is None else self.fine_labels[keep]
        return Dataset(
            images=self.images[keep],
            labels=labels,
            class_names=tuple(self.class_names[c] for c in class_ids),
            fine_labels=fine,
            fine_names=self.fine_names,
        )

    def by_fine_label(self) -> "Dataset":
        """Relabel every image by its sub-category (fine labels become the classes)."""
        if self.fine_labels is None:
            raise ConfigError("dataset has no fine labels")
        present = np.unique(self.fine_labels)
        remap = {int(f): i for i, f in enumerate(present)}
        names = self.fine_names or tuple(f"fine_{f}" for f in range(int(present.max()) + 1))
        return Dataset(
            images=self.images,
            labels=np.array([remap[int(f)] for f in self.fine_labels], dtype=np.int64),
            class_names=tuple(names[int(f)] for f in present),
        )


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.  Labels are episode-local; ``class_map[i]`` is the global id."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def k_shot(self) -> int:
        return len(self.support_labels) // self.n_way


@dataclass(frozen=True)
class SyntheticSpec:
    num_coarse_classes: int = 20
    subcats_per_class: int = 3
    samples_per_subcat: int = 40
    image_size: int = 32
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        for name in ("num_coarse_classes", "subcats_per_class", "samples_per_subcat"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.num_coarse_classes > len(_COARSE_FACTORS):
            raise ConfigError(
                f"at most {len(_COARSE_FACTORS)} coarse classes can be generated, "
                f"got {self.num_coarse_classes}"
            )


def load_image_folder(root_path, image_size: tuple[int, int] = (32, 32)) -> Dataset:
    """Read ``root/<class_name>/<image>`` into a Dataset (classes in sorted name order)."""
    root = Path(root_path)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ConfigError(f"no classes found under {root}")

    height, width = image_size
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        count = 0
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB").resize((width, height), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s (%s)", path, exc)
                continue
            images.append(arr)
            labels.append(label)
            count += 1
        if count == 0:
            raise ConfigError(f"class {class_dir.name!r} has no decodable images")

    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        class_names=tuple(p.name for p in class_dirs),
    )


# --- synthetic generator -------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ring", "hbar", "vbar")
STRIPE_FREQS = (0.0, 1.5, 3.0, 4.5)  # cycles across the shape's extent
STRIPE_ORIENTATIONS = (0.0, np.pi / 2)

# unstriped shapes have no orientation, so (freq 0, orientation 1) would duplicate a class
_COARSE_FACTORS = tuple(
    (s, f, o)
    for s, f, o in itertools.product(range(len(SHAPES)), range(len(STRIPE_FREQS)),
                                     range(len(STRIPE_ORIENTATIONS)))
    if STRIPE_FREQS[f] > 0 or o == 0
)


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Soft-edged mask in shape-local coordinates where the shape spans roughly [-1, 1]."""
    edge = 0.08
    if shape == "disk":
        d = np.hypot(u, v) - 1.0
    elif shape == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - 0.85
    elif shape == "triangle":
        d = np.maximum.reduce([v - 0.8, -0.866 * u - 0.5 * v - 0.4, 0.866 * u - 0.5 * v - 0.4])
    elif shape == "diamond":
        d = np.abs(u) + np.abs(v) - 1.1
    elif shape == "cross":
        arm_h = np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.3)
        arm_v = np.maximum(np.abs(v) - 1.0, np.abs(u) - 0.3)
        d = np.minimum(arm_h, arm_v)
    elif shape == "ring":
        r = np.hypot(u, v)
        d = np.abs(r - 0.75) - 0.25
    elif shape == "hbar":
        d = np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.4)
    elif shape == "vbar":
        d = np.maximum(np.abs(v) - 1.0, np.abs(u) - 0.4)
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return np.clip(0.5 - d / edge, 0.0, 1.0)


# area of each mask at unit scale; shapes are rescaled to equal area so that size
# carries no class information
_SHAPE_AREA = {"disk": 3.13, "square": 2.88, "triangle": 1.47, "diamond": 2.41,
               "cross": 2.03, "ring": 2.34, "hbar": 1.59, "vbar": 1.59}


# nuisance ranges: shape scale, foreground brightness gain, background gray level
SCALE_RANGE = (0.4, 0.75)
GAIN_RANGE = (0.8, 1.0)
BACKGROUND_RANGE = (0.15, 0.25)


def _hue_to_rgb(hue: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6.0) % 6.0
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def render_sample(shape: str, freq: float, orientation: float, hue: float, size: int,
                  rng: np.random.Generator, noise_std: float = 0.0) -> np.ndarray:
    """Render one ``(size, size, 3)`` image of a striped coloured shape at a random pose."""
    scale = rng.uniform(*SCALE_RANGE) * np.sqrt(2.2 / _SHAPE_AREA[shape])
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    rot = rng.uniform(-0.35, 0.35)
    gain = rng.uniform(*GAIN_RANGE)
    gray = rng.uniform(*BACKGROUND_RANGE)

    coords = np.linspace(-1.0, 1.0, size)
    y, x = np.meshgrid(coords, coords, indexing="ij")
    xr, yr = (x - cx) / scale, (y - cy) / scale
    c, s = np.cos(rot), np.sin(rot)
    u, v = c * xr + s * yr, -s * xr + c * yr

    mask = _shape_mask(shape, u, v)
    axis = np.cos(orientation) * u + np.sin(orientation) * v
    stripes = 0.55 + 0.45 * np.cos(np.pi * freq * axis)
    color = _hue_to_rgb(hue)
    foreground = gain * stripes[..., None] * color
    background = np.full(3, gray)
    img = mask[..., None] * foreground + (1.0 - mask[..., None]) * background
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Coarse classes are (shape, stripe frequency, stripe orientation) combinations;
    their sub-categories differ by hue.  The hue palette is shared by every coarse
    class, so colour carries no coarse-label information but separates sub-categories.
    """
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(_COARSE_FACTORS))[: spec.num_coarse_classes]
    hue_offset = rng.uniform()
    hues = [(hue_offset + j / spec.subcats_per_class) % 1.0 for j in range(spec.subcats_per_class)]

    images, labels, fine, class_names, fine_names = [], [], [], [], []
    for coarse, combo in enumerate(order):
        shape_i, freq_i, orient_i = _COARSE_FACTORS[combo]
        name = f"{SHAPES[shape_i]}-f{STRIPE_FREQS[freq_i]:g}-o{orient_i}"
        class_names.append(name)
        for j, hue in enumerate(hues):
            fine_id = coarse * spec.subcats_per_class + j
            fine_names.append(f"{name}/h{j}")
            for _ in range(spec.samples_per_subcat):
                images.append(render_sample(SHAPES[shape_i], STRIPE_FREQS[freq_i],
                                            STRIPE_ORIENTATIONS[orient_i], hue,
                                            spec.image_size, rng, spec.noise_std))
                labels.append(coarse)
                fine.append(fine_id)

    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        class_names=tuple(class_names),
        fine_labels=np.asarray(fine),
        fine_names=tuple(fine_names),
    )


def merge_classes(d: Dataset, ids: Sequence[int], new_name: str) -> Dataset:
    """Relabel ``ids`` as a single class named ``new_name``.

    The merged class takes the position of the smallest merged id; other classes keep
    their relative order and are re-indexed densely.  The pre-merge labels are kept as
    ``fine_labels`` unless the dataset already carries finer ones.
    """
    ids = [int(i) for i in ids]
    if not ids:
        raise ConfigError("merge_classes needs at least one class id")
    if len(set(ids)) != len(ids):
        raise ConfigError("merge_classes ids must be distinct")
    for i in ids:
        if not 0 <= i < d.num_classes:
            raise ConfigError(f"unknown class id {i} (dataset has {d.num_classes} classes)")

    merged = set(ids)
    target = min(ids)
    new_index, names = {}, []
    for c in range(d.num_classes):
        if c in merged and c != target:
            continue
        new_index[c] = len(names)
        names.append(new_name if c == target else d.class_names[c])
    for c in merged:
        new_index[c] = new_index[target]

    lookup = np.array([new_index[c] for c in range(d.num_classes)], dtype=np.int64)
    if d.fine_labels is None:
        fine, fine_names = d.labels, d.class_names
    else:
        fine, fine_names = d.fine_labels, d.fine_names
    return Dataset(
        images=d.images,
        labels=lookup[d.labels],
        class_names=tuple(names),
        fine_labels=fine,
        fine_names=fine_names,
    )


def sample_episode(d: Dataset, n_way: int, k_shot: int, m_query: int,
                   rng: np.random.Generator) -> Episode:
    """Sample an episode; ``m_query`` is the number of query images *per class*."""
    if n_way < 1 or k_shot < 1 or m_query < 0:
        raise ConfigError("n_way and k_shot must be >= 1, m_query >= 0")
    if d.num_classes < n_way:
        raise ConfigError(f"{n_way}-way episode needs {n_way} classes, dataset has {d.num_classes}")
    need = k_shot + m_query
    sizes = np.array([len(ix) for ix in d.class_indices])
    eligible = np.flatnonzero(sizes >= need)
    if len(eligible) < n_way:
        raise ConfigError(
            f"only {len(eligible)} classes have >= {need} images "
            f"(k_shot={k_shot} + m_query={m_query}); need {n_way}; smallest class has {sizes.min()}"
        )

    classes = rng.choice(eligible, size=n_way, replace=False)
    support, query = [], []
    for c in classes:
        picked = rng.choice(d.class_indices[c], size=need, replace=False)
        support.append(picked[:k_shot])
        query.append(picked[k_shot:])
    support_index = np.concatenate(support)
    query_index = np.concatenate(query) if m_query else np.zeros(0, dtype=np.int64)
    return Episode(
        support_images=d.images[support_index],
        support_labels=np.repeat(np.arange(n_way), k_shot),
        query_images=d.images[query_index],
        query_labels=np.repeat(np.arange(n_way), m_query),
        class_map=np.asarray(classes, dtype=np.int64),
        support_index=support_index,
        query_index=query_index,
    )


def split_classes(d: Dataset, n_train: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint class split into (train, held-out)."""
    if not 0 < n_train < d.num_classes:
        raise ConfigError(f"n_train must be in (0, {d.num_classes})")
    order = np.random.default_rng(seed).permutation(d.num_classes)
    return d.subset(sorted(order[:n_train])), d.subset(sorted(order[n_train:]))
