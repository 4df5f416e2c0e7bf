"""Synthetic circle/rectangle image protocols.

Two controlled protocols over 64x64 RGB images on a black background:
E1 trains on blue circles and red rectangles, E2 adds red circles; blue
rectangles are the held-out outlier class in both. Shape extents are drawn
uniformly from [10, 30] (rounded to integer pixels) and centers uniformly
inside the image, so shapes may be clipped at the border. Rasterization is
hard (no anti-aliasing) and outline mode draws a 2 pixel band, which keeps
generation bit-reproducible from (protocol, seed). The outline sets redraw
the same geometry as colorless white bands labeled by shape kind, turning
each protocol into a circle-vs-rectangle task with no color signal.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DatasetFormatError

__all__ = [
    "CLASS_TABLE",
    "IMAGE_SIZE",
    "LabeledDataset",
    "PROTOCOLS",
    "SHAPE_CLASS_NAMES",
    "ShapeSpec",
    "generate_outline_set",
    "generate_protocol",
    "load_dataset",
    "render_shape",
    "sample_shape_spec",
    "write_dataset",
]

IMAGE_SIZE = 64
EXTENT_LOW, EXTENT_HIGH = 10, 30
OUTLINE_THICKNESS = 2
TRAIN_PER_CLASS = 100
TEST_PER_CLASS = 50
OUTLIER_TEST_COUNT = 50

BLUE = (0.0, 0.0, 1.0)
RED = (1.0, 0.0, 0.0)
WHITE = (1.0, 1.0, 1.0)

# class name -> (shape kind, color)
CLASS_TABLE = {
    "blue-circle": ("circle", BLUE),
    "red-rectangle": ("rectangle", RED),
    "red-circle": ("circle", RED),
    "blue-rectangle": ("rectangle", BLUE),
}

# label space of the colorless outline sets
SHAPE_CLASS_NAMES = ("circle", "rectangle")

# protocol -> (inlier class names, outlier class name)
PROTOCOLS = {
    "E1": (("blue-circle", "red-rectangle"), "blue-rectangle"),
    "E2": (("blue-circle", "red-rectangle", "red-circle"), "blue-rectangle"),
}

ROLE_TRAIN = "train"
ROLE_TEST_INLIER = "test_inlier"
ROLE_TEST_OUTLIER = "test_outlier"


@dataclass(frozen=True)
class ShapeSpec:
    """Geometry and color of one shape on the 64x64 canvas.

    Circles carry a radius, rectangles carry width/height; all extents are
    integer pixels in [10, 30] and the center lies inside the canvas (the
    drawn footprint may still be clipped by the border).
    """

    kind: str
    color: tuple[float, float, float]
    fill: str = "filled"
    center_x: int = 0
    center_y: int = 0
    radius: int | None = None
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if self.kind not in ("circle", "rectangle"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.fill not in ("filled", "outline"):
            raise ValueError(f"unknown fill mode {self.fill!r}")
        if not (0 <= self.center_x < IMAGE_SIZE and 0 <= self.center_y < IMAGE_SIZE):
            raise ValueError("shape center must lie inside the image")
        extents = (self.radius,) if self.kind == "circle" else (self.width, self.height)
        for e in extents:
            if e is None or not (EXTENT_LOW <= e <= EXTENT_HIGH):
                raise ValueError(f"shape extent {e!r} outside [{EXTENT_LOW}, {EXTENT_HIGH}]")


@dataclass
class LabeledDataset:
    """Images with class ids and split roles for one protocol draw."""

    images: np.ndarray  # (n, 64, 64, 3) float64 in [0, 1]
    class_ids: np.ndarray  # (n,) int64
    roles: np.ndarray  # (n,) unicode, one of train/test_inlier/test_outlier
    class_names: tuple[str, ...]
    seed: int
    protocol: str = ""
    fill: str = "filled"

    def subset(self, role: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.roles == role
        return self.images[mask], self.class_ids[mask]

    @property
    def inlier_class_count(self) -> int:
        """Distinct classes with train-role samples (outlier classes only
        ever appear at test time)."""
        return int(np.unique(self.class_ids[self.roles == ROLE_TRAIN]).size)

    def same_as(self, other: "LabeledDataset") -> bool:
        return (
            self.class_names == other.class_names
            and self.seed == other.seed
            and np.array_equal(self.roles, other.roles)
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.images, other.images)
        )


def _as_rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def sample_shape_spec(class_id: str, rng_state, fill: str = "filled") -> ShapeSpec:
    """Draw geometry for one instance of a named class.

    Extents come from round(U[10, 30]) and the center from the integer
    pixel grid; draws happen in a fixed order so a seed pins the spec.
    """
    if class_id not in CLASS_TABLE:
        raise ValueError(f"unknown class {class_id!r}")
    kind, color = CLASS_TABLE[class_id]
    rng = _as_rng(rng_state)
    if kind == "circle":
        radius = int(np.rint(rng.uniform(EXTENT_LOW, EXTENT_HIGH)))
        dims = {"radius": radius}
    else:
        width = int(np.rint(rng.uniform(EXTENT_LOW, EXTENT_HIGH)))
        height = int(np.rint(rng.uniform(EXTENT_LOW, EXTENT_HIGH)))
        dims = {"width": width, "height": height}
    cx = int(rng.integers(0, IMAGE_SIZE))
    cy = int(rng.integers(0, IMAGE_SIZE))
    return ShapeSpec(kind=kind, color=color, fill=fill, center_x=cx, center_y=cy, **dims)


def _rect_mask(cx, cy, width, height, size):
    left = cx - width // 2
    top = cy - height // 2
    cols, rows = np.meshgrid(np.arange(size), np.arange(size))
    return (
        (cols >= left)
        & (cols <= left + width - 1)
        & (rows >= top)
        & (rows <= top + height - 1)
    )


def _circle_mask(cx, cy, radius, size):
    if radius < 0:
        return np.zeros((size, size), dtype=bool)
    cols, rows = np.meshgrid(np.arange(size), np.arange(size))
    return (cols - cx) ** 2 + (rows - cy) ** 2 <= radius**2


def render_shape(spec: ShapeSpec, dims: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """Rasterize a spec onto a black canvas; outline mode erodes the filled
    mask by the band thickness."""
    if dims != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"canvas must be {IMAGE_SIZE}x{IMAGE_SIZE}")
    size = dims[0]
    if spec.kind == "circle":
        mask = _circle_mask(spec.center_x, spec.center_y, spec.radius, size)
        if spec.fill == "outline":
            mask &= ~_circle_mask(
                spec.center_x, spec.center_y, spec.radius - OUTLINE_THICKNESS, size
            )
    else:
        mask = _rect_mask(spec.center_x, spec.center_y, spec.width, spec.height, size)
        if spec.fill == "outline":
            # shrinking both extents by twice the band keeps the same anchor:
            # (w - 2t)//2 == w//2 - t for integer w
            t = OUTLINE_THICKNESS
            if spec.width > 2 * t and spec.height > 2 * t:
                mask &= ~_rect_mask(
                    spec.center_x, spec.center_y, spec.width - 2 * t, spec.height - 2 * t, size
                )
    image = np.zeros((size, size, 3), dtype=np.float64)
    image[mask] = spec.color
    return image


def _protocol_plan(protocol: str) -> tuple[tuple[str, ...], list[tuple[int, str]]]:
    """Deterministic (class_id, role) sequence for a protocol."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {sorted(PROTOCOLS)}")
    inliers, outlier = PROTOCOLS[protocol]
    class_names = inliers + (outlier,)
    plan: list[tuple[int, str]] = []
    for cid in range(len(inliers)):
        plan.extend((cid, ROLE_TRAIN) for _ in range(TRAIN_PER_CLASS))
    for cid in range(len(inliers)):
        plan.extend((cid, ROLE_TEST_INLIER) for _ in range(TEST_PER_CLASS))
    plan.extend((len(inliers), ROLE_TEST_OUTLIER) for _ in range(OUTLIER_TEST_COUNT))
    return class_names, plan


def generate_protocol(protocol: str, seed: int, fill: str = "filled") -> LabeledDataset:
    """Generate a full protocol draw: 100 train + 50 test per inlier class
    plus 50 outlier test images. Pure function of (protocol, seed, fill);
    each image uses a child seed keyed by its position, so the outline
    variant redraws the same geometry."""
    class_names, plan = _protocol_plan(protocol)
    images = np.zeros((len(plan), IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    class_ids = np.zeros(len(plan), dtype=np.int64)
    roles = np.empty(len(plan), dtype="<U12")
    for i, (cid, role) in enumerate(plan):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        spec = sample_shape_spec(class_names[cid], rng, fill=fill)
        images[i] = render_shape(spec)
        class_ids[i] = cid
        roles[i] = role
    return LabeledDataset(images, class_ids, roles, class_names, int(seed), protocol, fill)


def generate_outline_set(protocol: str, seed: int) -> LabeledDataset:
    """Colorless shape-classification variant of a protocol draw.

    Redraws the protocol's geometry (same per-position child seeds) as white
    2 px outline bands on black, so color carries no class signal, and labels
    collapse to the shape kind: circle=0, rectangle=1. A model finetuned on
    this set must rely on whatever shape information its layers encode. The
    protocol's outlier draws are omitted; with color gone, a rectangle is a
    rectangle regardless of which class drew it.
    """
    class_names, plan = _protocol_plan(protocol)
    kept = [(i, cid, role) for i, (cid, role) in enumerate(plan) if role != ROLE_TEST_OUTLIER]
    images = np.zeros((len(kept), IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    class_ids = np.zeros(len(kept), dtype=np.int64)
    roles = np.empty(len(kept), dtype="<U12")
    for row, (i, cid, role) in enumerate(kept):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        spec = sample_shape_spec(class_names[cid], rng, fill="outline")
        images[row] = render_shape(replace(spec, color=WHITE))
        class_ids[row] = SHAPE_CLASS_NAMES.index(spec.kind)
        roles[row] = role
    return LabeledDataset(
        images, class_ids, roles, SHAPE_CLASS_NAMES, int(seed), protocol, "outline"
    )


# ------------------------------------------------------------------ file io

_PPM_MAXVAL = 255


def _write_ppm(path, image: np.ndarray) -> None:
    data = np.rint(np.clip(image, 0.0, 1.0) * _PPM_MAXVAL).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n%d\n" % (image.shape[1], image.shape[0], _PPM_MAXVAL))
        fh.write(data.tobytes())


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise DatasetFormatError(f"{path}: not a binary pixmap (P6) file")
    # header: magic, width, height, maxval, one whitespace byte, then raster
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise DatasetFormatError(f"{path}: malformed pixmap header")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != _PPM_MAXVAL:
        raise DatasetFormatError(f"{path}: unsupported maxval {maxval}")
    raster = blob[pos : pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise DatasetFormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / _PPM_MAXVAL


_MANIFEST_MAGIC = "# osrlab-dataset v1"
_VALID_ROLES = (ROLE_TRAIN, ROLE_TEST_INLIER, ROLE_TEST_OUTLIER)


def write_dataset(ds: LabeledDataset, path) -> str:
    """Store images as pixmap files plus a plain-text manifest; returns the
    manifest path. Renders use exact 8-bit colors, so write/load round-trips
    are bit-exact."""
    os.makedirs(path, exist_ok=True)
    lines = [
        _MANIFEST_MAGIC,
        f"# protocol={ds.protocol}",
        f"# seed={ds.seed}",
        f"# fill={ds.fill}",
        "# classes=" + ",".join(ds.class_names),
    ]
    for i in range(len(ds.images)):
        name = f"img_{i:05d}.ppm"
        _write_ppm(os.path.join(path, name), ds.images[i])
        lines.append(f"{name} {int(ds.class_ids[i])} {ds.roles[i]}")
    manifest = os.path.join(path, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def _parse_manifest_header(lines: Sequence[str], manifest_path) -> dict:
    if not lines or lines[0].strip() != _MANIFEST_MAGIC:
        raise DatasetFormatError(f"{manifest_path}: missing manifest magic line")
    meta = {}
    for ln in lines:
        m = re.match(r"#\s*(\w+)=(.*)$", ln.strip())
        if m:
            meta[m.group(1)] = m.group(2)
    for key in ("seed", "classes"):
        if key not in meta:
            raise DatasetFormatError(f"{manifest_path}: manifest lacks '{key}' header")
    return meta


def load_dataset(path) -> LabeledDataset:
    """Load a dataset written by :func:`write_dataset`; `path` may be the
    directory or the manifest file itself."""
    manifest = path if os.path.isfile(path) else os.path.join(path, "manifest.txt")
    if not os.path.isfile(manifest):
        raise DatasetFormatError(f"{manifest}: manifest not found")
    root = os.path.dirname(os.path.abspath(manifest))
    with open(manifest) as fh:
        lines = fh.read().splitlines()
    meta = _parse_manifest_header(lines, manifest)
    class_names = tuple(meta["classes"].split(","))
    rows = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    images, class_ids, roles = [], [], []
    for ln in rows:
        parts = ln.split()
        if len(parts) != 3:
            raise DatasetFormatError(f"{manifest}: malformed row {ln!r}")
        rel, cid_text, role = parts
        if not cid_text.lstrip("-").isdigit():
            raise DatasetFormatError(f"{manifest}: bad class id in row {ln!r}")
        cid = int(cid_text)
        if not 0 <= cid < len(class_names):
            raise DatasetFormatError(f"{manifest}: class id {cid} outside class table")
        if role not in _VALID_ROLES:
            raise DatasetFormatError(f"{manifest}: unknown role {role!r}")
        img_path = os.path.join(root, rel)
        if not os.path.isfile(img_path):
            raise DatasetFormatError(f"{manifest}: listed image {rel} missing")
        images.append(_read_ppm(img_path))
        class_ids.append(cid)
        roles.append(role)
    if not images:
        raise DatasetFormatError(f"{manifest}: manifest lists no images")
    return LabeledDataset(
        images=np.stack(images),
        class_ids=np.array(class_ids, dtype=np.int64),
        roles=np.array(roles, dtype="<U12"),
        class_names=class_names,
        seed=int(meta["seed"]),
        protocol=meta.get("protocol", ""),
        fill=meta.get("fill", "filled"),
    )
