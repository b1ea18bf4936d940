"""Dataset ingestion: IDX digit files and a synthetic shapes generator.

The IDX parser reads the standard big-endian container used to distribute
handwritten-digit datasets.  The shapes generator renders labeled images of
simple shapes from a small class grammar; it is separable by the reference
CNN by construction and fully deterministic per seed, so it backs the
desk-scale experiments and the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .metrics import AnnotationSet, Keypoint

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) or (N, H, W, C), values in [0, 1]
    labels: np.ndarray  # (N,) ints
    class_count: int
    split: str = ""
    ids: list = field(default_factory=list)
    annotations: AnnotationSet | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"image count {len(self.images)} != label count {len(self.labels)}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ShapeError("labels must lie in [0, class_count)")
        if not self.ids:
            self.ids = [f"{self.split or 'img'}-{k}" for k in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    def indices_of_class(self, cls: int):
        return np.flatnonzero(self.labels == cls)


def load_idx(images_path: str, labels_path: str, split: str = "") -> Dataset:
    """Parse a big-endian IDX image/label file pair; bytes scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{images_path}: truncated header at byte {len(header)}")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x} at byte 0 (want 0x{IDX_IMAGES_MAGIC:08x})"
            )
        body = fh.read()
    expected = count * rows * cols
    if len(body) < expected:
        raise FormatError(f"{images_path}: truncated pixel data at byte {16 + len(body)}")
    images = np.frombuffer(body[:expected], dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise FormatError(f"{labels_path}: truncated header at byte {len(header)}")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at byte 0 (want 0x{IDX_LABELS_MAGIC:08x})"
            )
        body = fh.read()
    if len(body) < label_count:
        raise FormatError(f"{labels_path}: truncated label data at byte {8 + len(body)}")
    labels = np.frombuffer(body[:label_count], dtype=np.uint8)

    if count != label_count:
        raise FormatError(f"image count {count} does not match label count {label_count}")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(int), 10, split=split)


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray):
    """Inverse of load_idx, for fixtures and exports."""
    imgs = np.asarray(images)
    if imgs.ndim == 4 and imgs.shape[3] == 1:
        imgs = imgs[..., 0]
    data = np.round(np.clip(imgs, 0, 1) * 255.0).astype(np.uint8)
    n, rows, cols = data.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(data.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

DEFAULT_GRAMMAR = (
    {"shape": "circle", "position": "left"},
    {"shape": "circle", "position": "right"},
    {"shape": "square", "position": "left"},
    {"shape": "square", "position": "right"},
)

_POSITIONS = {"left": 0.3, "right": 0.7, "center": 0.5}


def _render_shape(size: int, shape: str, cx: float, cy: float, radius: float) -> np.ndarray:
    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    if shape == "circle":
        mask = np.hypot(ys - cy, xs - cx) <= radius
    elif shape == "square":
        mask = (np.abs(ys - cy) <= radius) & (np.abs(xs - cx) <= radius)
    elif shape == "triangle":
        # upright triangle: widens linearly from apex at cy - radius
        t = (ys - (cy - radius)) / (2 * radius)
        mask = (t >= 0) & (t <= 1) & (np.abs(xs - cx) <= t * radius)
    else:
        raise ShapeError(f"unknown shape {shape!r}")
    return mask.astype(np.float64)


def gen_shapes(
    count: int,
    size: int = 28,
    grammar=DEFAULT_GRAMMAR,
    seed: int = 0,
    noise: float = 0.05,
    with_annotations: bool = False,
    split: str = "shapes",
) -> Dataset:
    """Labeled images of simple shapes; class = one grammar entry.

    Positions and radii jitter within the class cell; a deterministic seeded
    generator drives everything, so identical seeds give identical datasets.
    """
    if count <= 0:
        raise ShapeError("count must be positive")
    from .rng import substream

    rng = substream(seed, f"shapes-{split}")
    images = np.zeros((count, size, size))
    labels = np.zeros(count, dtype=int)
    annotations = AnnotationSet() if with_annotations else None
    ids = [f"{split}-{k}" for k in range(count)]
    for k in range(count):
        cls = int(rng.integers(len(grammar)))
        spec = grammar[cls]
        cx = _POSITIONS[spec.get("position", "center")] * size + rng.uniform(-1.5, 1.5)
        cy = 0.5 * size + rng.uniform(-1.5, 1.5)
        radius = size * rng.uniform(0.12, 0.18)
        img = _render_shape(size, spec["shape"], cx, cy, radius)
        img = np.clip(img + rng.normal(0, noise, img.shape), 0.0, 1.0)
        images[k] = img
        labels[k] = cls
        if with_annotations:
            kps = [
                Keypoint("center", float(np.clip(cx, 0, size - 1)), float(np.clip(cy, 0, size - 1)), True),
                Keypoint("top", float(np.clip(cx, 0, size - 1)), float(np.clip(cy - radius, 0, size - 1)), True),
            ]
            annotations.add(ids[k], _render_shape(size, spec["shape"], cx, cy, radius) > 0.5, kps)
    return Dataset(images, labels, len(grammar), split=split, ids=ids, annotations=annotations)
