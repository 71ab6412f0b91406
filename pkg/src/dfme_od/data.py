"""Single-object shapes dataset: generation, on-disk format, loading and preprocessing.

On-disk layout of a dataset directory::

    DIR/
      dataset.json        # generation spec + class names
      annotations.jsonl   # one record per image, boxes in pixels
      images/000000.png   # lossless RGB images

Each annotation record has the fields ``image_id, label, x_min, y_min,
x_max, y_max, width, height``. Pixel boxes use exclusive upper edges, so a
full-frame box is ``(0, 0, W, H)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from PIL import Image, ImageDraw

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "hbar")
ANNOTATION_FIELDS = ("image_id", "label", "x_min", "y_min", "x_max", "y_max", "width", "height")


class DatasetError(ValueError):
    """Raised for invalid specs, malformed annotation files or missing images."""


@dataclass(frozen=True)
class Annotation:
    image_id: str
    label: int
    box_px: tuple[float, float, float, float]
    width: int
    height: int

    def validate(self, class_count: int | None = None) -> None:
        x_min, y_min, x_max, y_max = self.box_px
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(f"{self.image_id}: degenerate image size {self.width}x{self.height}")
        if not (0 <= x_min < x_max <= self.width and 0 <= y_min < y_max <= self.height):
            raise DatasetError(f"{self.image_id}: box {self.box_px} outside {self.width}x{self.height}")
        if self.label < 0 or (class_count is not None and self.label >= class_count):
            raise DatasetError(f"{self.image_id}: label {self.label} out of range")

    def to_record(self) -> dict:
        x_min, y_min, x_max, y_max = self.box_px
        return {
            "image_id": self.image_id,
            "label": self.label,
            "x_min": x_min,
            "y_min": y_min,
            "x_max": x_max,
            "y_max": y_max,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Annotation":
        missing = [k for k in ANNOTATION_FIELDS if k not in rec]
        if missing:
            raise DatasetError(f"missing fields {missing}")
        return cls(
            image_id=str(rec["image_id"]),
            label=int(rec["label"]),
            box_px=(float(rec["x_min"]), float(rec["y_min"]), float(rec["x_max"]), float(rec["y_max"])),
            width=int(rec["width"]),
            height=int(rec["height"]),
        )


class NormalizedBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def is_valid(self) -> bool:
        return (
            all(0.0 <= v <= 1.0 for v in self)
            and self.x_min < self.x_max
            and self.y_min < self.y_max
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a generated shapes dataset.

    ``shapes`` lists the shape drawn for each class id; by default the first
    ``class_count`` entries of :data:`SHAPES`.
    """

    class_count: int = 3
    side: int = 64
    count: int = 600
    seed: int = 0
    size_range: tuple[float, float] = (0.3, 0.6)
    background: str = "solid"
    shapes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.shapes:
            object.__setattr__(self, "shapes", SHAPES[: self.class_count])
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "size_range", tuple(self.size_range))

    def validate(self) -> None:
        if self.class_count < 2:
            raise DatasetError("class_count must be >= 2")
        if self.class_count > len(SHAPES):
            raise DatasetError(f"at most {len(SHAPES)} classes are available")
        if len(self.shapes) != self.class_count or any(s not in SHAPES for s in self.shapes):
            raise DatasetError(f"shapes {self.shapes} do not match class_count {self.class_count}")
        lo, hi = self.size_range
        if not (0.0 < lo <= hi < 1.0):
            raise DatasetError(f"size_range {self.size_range} must lie within (0, 1)")
        if math.ceil(lo * self.side) < 4:
            raise DatasetError("objects would be smaller than 4 pixels")
        if self.count <= 0:
            raise DatasetError("count must be positive")
        if self.background not in ("solid", "noise"):
            raise DatasetError(f"unknown background mode {self.background!r}")


# ---------------------------------------------------------------------------
# box and pixel preprocessing

def normalize_annotation(ann: Annotation) -> NormalizedBox:
    """Divide x coordinates by the image width and y coordinates by its height."""
    if ann.width == 0 or ann.height == 0:
        raise DatasetError(f"{ann.image_id}: zero width or height")
    x_min, y_min, x_max, y_max = ann.box_px
    return NormalizedBox(x_min / ann.width, y_min / ann.height, x_max / ann.width, y_max / ann.height)


def denormalize_box(box, width: float, height: float) -> tuple[float, float, float, float]:
    x_min, y_min, x_max, y_max = box
    return (x_min * width, y_min * height, x_max * width, y_max * height)


def scale_pixels(raw: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Map integer pixels in ``[0, 2**bit_depth - 1]`` to float32 in ``[0, 1]``."""
    if bit_depth not in (1, 8, 16):
        raise DatasetError(f"unsupported bit depth {bit_depth}")
    raw = np.asarray(raw)
    top = (1 << bit_depth) - 1
    if raw.size and (raw.min() < 0 or raw.max() > top):
        raise DatasetError(f"pixel values outside [0, {top}]")
    return (raw.astype(np.float64) / top).astype(np.float32)


# ---------------------------------------------------------------------------
# generation

def _shape_polygon(shape: str, x0: int, y0: int, s: int, flip: bool) -> list[tuple[float, float]] | None:
    e = s - 1
    if shape == "triangle":
        if flip:
            return [(x0, y0), (x0 + e, y0), (x0 + e / 2, y0 + e)]
        return [(x0, y0 + e), (x0 + e, y0 + e), (x0 + e / 2, y0)]
    if shape == "diamond":
        return [(x0 + e / 2, y0), (x0 + e, y0 + e / 2), (x0 + e / 2, y0 + e), (x0, y0 + e / 2)]
    return None


def _render_shape(mask_draw: ImageDraw.ImageDraw, shape: str, x0: int, y0: int, s: int, flip: bool) -> None:
    e = s - 1
    if shape == "circle":
        mask_draw.ellipse([x0, y0, x0 + e, y0 + e], fill=255)
    elif shape == "square":
        mask_draw.rectangle([x0, y0, x0 + e, y0 + e], fill=255)
    elif shape == "cross":
        t = max(2, s // 3)
        c = (s - t) // 2
        mask_draw.rectangle([x0 + c, y0, x0 + c + t - 1, y0 + e], fill=255)
        mask_draw.rectangle([x0, y0 + c, x0 + e, y0 + c + t - 1], fill=255)
    elif shape == "hbar":
        t = max(2, s // 3)
        c = (s - t) // 2
        mask_draw.rectangle([x0, y0 + c, x0 + e, y0 + c + t - 1], fill=255)
    else:
        mask_draw.polygon(_shape_polygon(shape, x0, y0, s, flip), fill=255)


def render_sample(spec: DatasetSpec, label: int, rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Render one image of class ``label``; returns (uint8 HxWx3, tight pixel box)."""
    side = spec.side
    lo = math.ceil(spec.size_range[0] * side)
    hi = max(lo, math.floor(spec.size_range[1] * side))
    s = int(rng.integers(lo, hi + 1))
    x0 = int(rng.integers(0, side - s + 1))
    y0 = int(rng.integers(0, side - s + 1))
    flip = bool(rng.integers(0, 2))

    mask_img = Image.new("L", (side, side), 0)
    _render_shape(ImageDraw.Draw(mask_img), spec.shapes[label], x0, y0, s, flip)
    mask = np.asarray(mask_img) > 127

    bg = rng.integers(0, 256, size=3)
    # keep the object visibly distinct from the background
    while True:
        fg = rng.integers(0, 256, size=3)
        if np.abs(fg - bg).sum() >= 192:
            break
    img = np.broadcast_to(bg, (side, side, 3)).astype(np.float64)
    if spec.background == "noise":
        img = img + rng.normal(0.0, 20.0, size=img.shape)
    img[mask] = fg
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return img, box


def generate_shapes_dataset(spec: DatasetSpec, out_dir) -> list[Annotation]:
    """Render ``spec.count`` images into ``out_dir`` and write the annotation file.

    Labels cycle through the classes in a seeded random order so each class
    appears ``count // C`` or ``count // C + 1`` times.
    """
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    labels = np.resize(np.arange(spec.class_count), spec.count)
    rng.shuffle(labels)
    width = len(str(spec.count - 1))
    annotations = []
    for i, label in enumerate(labels):
        img, box = render_sample(spec, int(label), rng)
        image_id = f"{i:0{max(6, width)}d}"
        Image.fromarray(img).save(out / "images" / f"{image_id}.png")
        ann = Annotation(image_id, int(label), tuple(float(v) for v in box), spec.side, spec.side)
        ann.validate(spec.class_count)
        annotations.append(ann)

    with open(out / "annotations.jsonl", "w") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_record(), sort_keys=True) + "\n")
    meta = asdict(spec)
    meta["class_names"] = list(spec.shapes)
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return annotations


# ---------------------------------------------------------------------------
# loading

class Sample(NamedTuple):
    image: np.ndarray  # float32 HxWxC in [0, 1]
    label: int
    box: NormalizedBox


def read_annotations(path) -> list[Annotation]:
    path = Path(path)
    ann_file = path / "annotations.jsonl" if path.is_dir() else path
    if not ann_file.exists():
        raise DatasetError(f"annotation file not found: {ann_file}")
    class_count = None
    meta_file = ann_file.parent / "dataset.json"
    if meta_file.exists():
        class_count = json.loads(meta_file.read_text()).get("class_count")
    anns = []
    with open(ann_file) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ann = Annotation.from_record(json.loads(line))
                ann.validate(class_count)
            except (json.JSONDecodeError, DatasetError, TypeError, ValueError) as exc:
                raise DatasetError(f"{ann_file}:{lineno}: malformed annotation: {exc}") from exc
            anns.append(ann)
    return anns


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return scale_pixels(np.asarray(im.convert("RGB")), 8)


def load_dataset(path, shuffle: bool = False, seed: int | None = None) -> Iterator[Sample]:
    """Yield preprocessed samples from a dataset directory.

    Missing images raise :class:`DatasetError` naming the file. With
    ``shuffle`` the order is a seeded permutation of the annotation order.
    """
    path = Path(path)
    anns = read_annotations(path)
    order = np.arange(len(anns))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for i in order:
        ann = anns[i]
        img_file = path / "images" / f"{ann.image_id}.png"
        if not img_file.exists():
            raise DatasetError(f"missing image file {img_file} referenced by {ann.image_id}")
        yield Sample(load_image(img_file), ann.label, normalize_annotation(ann))


@dataclass
class ArrayDataset:
    """Whole dataset held as arrays: images (N,H,W,C) float32, labels (N,), boxes (N,4)."""

    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray
    class_count: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.images[idx], self.labels[idx], self.boxes[idx], self.class_count)

    def split(self, n_test: int) -> tuple["ArrayDataset", "ArrayDataset"]:
        """Deterministic split: the last ``n_test`` samples are held out."""
        if not 0 < n_test < len(self):
            raise DatasetError(f"cannot hold out {n_test} of {len(self)} samples")
        cut = len(self) - n_test
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))


def load_arrays(path) -> ArrayDataset:
    path = Path(path)
    samples = list(load_dataset(path))
    if not samples:
        raise DatasetError(f"dataset at {path} is empty")
    meta_file = path / "dataset.json"
    if meta_file.exists():
        class_count = int(json.loads(meta_file.read_text())["class_count"])
    else:
        class_count = max(s.label for s in samples) + 1
    return ArrayDataset(
        images=np.stack([s.image for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        boxes=np.array([tuple(s.box) for s in samples], dtype=np.float32),
        class_count=class_count,
    )
