"""Dataset plumbing: VOC-style XML annotations, PPM images, resizing,
stratified splitting, synthetic corpus generation, and Gaussian blur.

Boxes are stored in original-image coordinates inside the XML and rescaled by
callers using the factors returned from :func:`load_and_resize`.
"""

from __future__ import annotations

import csv
import io
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import Box


class AnnotationParseError(ValueError):
    """Malformed XML; message carries the byte offset where parsing stopped."""


class AnnotationSchemaError(ValueError):
    """Well-formed XML missing a required element or attribute."""


class AnnotationValidationError(ValueError):
    """Schema-complete XML whose values violate box or size invariants."""


class ImageFormatError(ValueError):
    """The image file is not in a supported format."""


@dataclass(frozen=True)
class AnnotationRecord:
    """One image's labelled boxes."""

    filename: str
    width: int
    height: int
    depth: int
    objects: tuple  # of (class name, Box)


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str


def make_labels(names: Sequence[str]) -> list:
    """Bijective id<->name mapping; background is implicitly id len(names)."""
    return [ClassLabel(i, n) for i, n in enumerate(names)]


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0
    per_class_counts: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# VOC-style XML
# ---------------------------------------------------------------------------

def _require(parent, tag, context):
    node = parent.find(tag)
    if node is None or (node.text is None and len(node) == 0):
        raise AnnotationSchemaError(f"missing <{tag}> under <{context}>")
    return node


def parse_voc_xml(blob: bytes) -> AnnotationRecord:
    """Parse an annotation document; unknown elements are ignored."""
    try:
        root = ET.fromstring(blob)
    except ET.ParseError as exc:
        line, col = exc.position
        offset = sum(len(l) + 1 for l in blob.split(b"\n")[:line - 1]) + col
        raise AnnotationParseError(f"malformed XML at byte {offset}: {exc}") from exc

    filename = _require(root, "filename", "annotation").text.strip()
    size = _require(root, "size", "annotation")
    width = int(_require(size, "width", "size").text)
    height = int(_require(size, "height", "size").text)
    depth = int(_require(size, "depth", "size").text)
    if width <= 0 or height <= 0:
        raise AnnotationValidationError(f"non-positive image size {width}x{height}")

    objects = []
    for obj in root.findall("object"):
        name = _require(obj, "name", "object").text.strip()
        if not name:
            raise AnnotationValidationError("empty class name in <object>")
        bnd = _require(obj, "bndbox", "object")
        coords = {}
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            coords[tag] = float(_require(bnd, tag, "bndbox").text)
        if coords["xmin"] >= coords["xmax"] or coords["ymin"] >= coords["ymax"]:
            raise AnnotationValidationError(
                f"degenerate bndbox ({coords['xmin']}, {coords['ymin']}, "
                f"{coords['xmax']}, {coords['ymax']}) in {filename}")
        box = Box(coords["xmin"], coords["ymin"], coords["xmax"], coords["ymax"])
        if box.x1 < 0 or box.y1 < 0 or box.x2 > width or box.y2 > height:
            raise AnnotationValidationError(f"bndbox {box} outside {width}x{height} image")
        objects.append((name, box))
    return AnnotationRecord(filename, width, height, depth, tuple(objects))


def write_voc_xml(record: AnnotationRecord) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = record.filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.width)
    ET.SubElement(size, "height").text = str(record.height)
    ET.SubElement(size, "depth").text = str(record.depth)
    for name, box in record.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = name
        bnd = ET.SubElement(obj, "bndbox")
        ET.SubElement(bnd, "xmin").text = repr(box.x1)
        ET.SubElement(bnd, "ymin").text = repr(box.y1)
        ET.SubElement(bnd, "xmax").text = repr(box.x2)
        ET.SubElement(bnd, "ymax").text = repr(box.y2)
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_ppm(path, image_hwc_u8: np.ndarray):
    """Binary P6 with maxval 255."""
    img = np.ascontiguousarray(image_hwc_u8, dtype=np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ImageFormatError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    # header = magic, width, height, maxval; separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported PPM maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def _read_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        return read_ppm(path)
    if suffix == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageFormatError("PNG support needs the optional Pillow dependency") from exc
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise ImageFormatError(f"unsupported image format {suffix!r} for {path}")


def bilinear_resize(image_hwc: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Half-pixel-centered bilinear resampling of an HWC float array."""
    h, w = image_hwc.shape[:2]
    if (h, w) == (out_h, out_w):
        return image_hwc.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = image_hwc[y0][:, x0] * (1 - fx) + image_hwc[y0][:, x1] * fx
    bot = image_hwc[y1][:, x0] * (1 - fx) + image_hwc[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def load_and_resize(path, target: int = 256):
    """Load an image, resize to target x target, scale values into [0, 1].

    Returns ``(tensor_chw, (sx, sy))``; multiplying box x coordinates by sx
    and y by sy maps original-image annotations onto the resized image.
    """
    raw = _read_image(path).astype(np.float32) / 255.0
    h, w = raw.shape[:2]
    resized = bilinear_resize(raw, target, target)
    chw = np.ascontiguousarray(resized.transpose(2, 0, 1), dtype=np.float32)
    return chw, (target / w, target / h)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_counts(n: int, ratios=(0.7, 0.2, 0.1)) -> tuple:
    """floor / half-up round / remainder allocation of n items."""
    tr = math.floor(ratios[0] * n)
    va = math.floor(ratios[1] * n + 0.5)
    return tr, va, n - tr - va


def split_dataset(records_by_class: dict, ratios=(0.7, 0.2, 0.1), seed: int = 0) -> DatasetSplit:
    """Per-class seeded shuffle, then floor/round/remainder allocation."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} do not sum to 1")
    split = DatasetSplit(seed=seed)
    rng = np.random.default_rng(seed)
    for cls in sorted(records_by_class):
        records = list(records_by_class[cls])
        if not records:
            split.per_class_counts[cls] = (0, 0, 0)
            continue
        order = rng.permutation(len(records))
        shuffled = [records[i] for i in order]
        tr, va, te = split_counts(len(records), ratios)
        split.train.extend(shuffled[:tr])
        split.val.extend(shuffled[tr:tr + va])
        split.test.extend(shuffled[tr + va:])
        split.per_class_counts[cls] = (tr, va, te)
    return split


def write_manifest(path, rows):
    """rows of (filename, split, class); UTF-8, LF line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "split", "class"])
        writer.writerows(rows)


def read_manifest(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["filename", "split", "class"]:
            raise ValueError(f"unexpected manifest header {header}")
        return [tuple(row) for row in reader]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

# Saturated, well-separated blob colors; up to eight classes.
_PALETTE = np.array([
    (200, 40, 40), (40, 170, 40), (40, 70, 210), (220, 190, 40),
    (170, 40, 190), (40, 190, 190), (230, 120, 30), (120, 70, 20),
], dtype=np.float32)


def synth_image(class_id: int, image_size: int, rng: np.random.Generator):
    """One textured background plus one class-colored blob; returns (u8 HWC, Box).

    The blob's tight bounding box is the ground truth.  Fully deterministic
    given the generator state.
    """
    s = image_size
    base = np.full((s, s, 3), (90, 110, 80), dtype=np.float32)
    noise = rng.normal(0.0, 12.0, size=(s, s, 3)).astype(np.float32)
    img = base + noise

    margin = max(4, s // 16)
    bw = rng.uniform(0.25 * s, 0.55 * s)
    bh = rng.uniform(0.25 * s, 0.55 * s)
    cx = rng.uniform(margin + bw / 2, s - margin - bw / 2)
    cy = rng.uniform(margin + bh / 2, s - margin - bh / 2)

    ys, xs = np.mgrid[0:s, 0:s]
    inside = (((xs + 0.5 - cx) / (bw / 2)) ** 2 + ((ys + 0.5 - cy) / (bh / 2)) ** 2) <= 1.0
    color = _PALETTE[class_id % len(_PALETTE)]
    stripe_period = max(3, s // 24)
    stripes = ((xs + ys) // stripe_period) % 2 == 0
    shade = np.where(stripes, 1.0, 0.72)[..., None].astype(np.float32)
    img = np.where(inside[..., None], color * shade, img)

    rows = np.nonzero(inside.any(axis=1))[0]
    cols = np.nonzero(inside.any(axis=0))[0]
    box = Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
    return np.clip(img, 0, 255).astype(np.uint8), box


def synth_dataset(n_images: int, class_names: Sequence[str], image_size: int, seed: int):
    """Deterministic annotated corpus; classes round-robin over the images.

    Returns a list of ``(image_u8_hwc, AnnotationRecord)``.
    """
    if n_images < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        cid = i % len(class_names)
        img, box = synth_image(cid, image_size, rng)
        record = AnnotationRecord(
            filename=f"synth_{i:04d}.ppm", width=image_size, height=image_size,
            depth=3, objects=((class_names[cid], box),))
        out.append((img, record))
    return out


# ---------------------------------------------------------------------------
# blur
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0], dtype=np.float64)
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def blur_image(image_chw: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; sigma 0 is the identity."""
    if sigma == 0:
        return image_chw.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = image_chw.astype(np.float64, copy=True)
    padded = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = sum(k[i] * padded[:, i:i + image_chw.shape[1], :] for i in range(len(k)))
    padded = np.pad(out, ((0, 0), (0, 0), (r, r)), mode="reflect")
    out = sum(k[i] * padded[:, :, i:i + image_chw.shape[2]] for i in range(len(k)))
    return out.astype(image_chw.dtype)
