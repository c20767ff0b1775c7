"""Annotation ingestion, mask rasterisation, region-guided patch extraction,
corner-translation augmentation and subject-level dataset splits.

Annotation XML schema (native format)::

    <annotations subject="S01">
      <annotation label="plaque">
        <vertex x="10.5" y="20"/>
        ...
      </annotation>
    </annotations>

Attribute names are case-insensitive; ``vertex`` elements may sit directly
under ``annotation`` or inside any wrapper element. Other formats plug in
through :func:`register_converter`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from shapely.geometry import LinearRing

from .errors import (
    AnnotationTooLarge,
    EmptyAnnotationSet,
    MalformedXml,
    OverlappingSplit,
    SlideTooSmall,
    UnassignedSubject,
)
from .raster import ColorSpace, PlanarImage, write_image

PATCH_SIZE = 256
CORNER_MARGIN = 4


class PatchWarning(UserWarning):
    """A record or polygon was skipped; the batch carries on."""


# ---- annotations -------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    label: str
    polygon: tuple[tuple[float, float], ...]

    def __post_init__(self):
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        if len(poly) < 3:
            raise ValueError("a polygon needs at least 3 vertices")
        object.__setattr__(self, "polygon", poly)

    @property
    def vertices(self) -> np.ndarray:
        return np.array(self.polygon)

    def bbox(self) -> tuple[float, float, float, float]:
        """``(x_min, y_min, x_max, y_max)`` of the vertices."""
        v = self.vertices
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def pixel_bbox(self) -> tuple[int, int, int, int]:
        """Inclusive integer bbox of the pixel centres the polygon can cover."""
        x0, y0, x1, y1 = self.bbox()
        return math.ceil(x0), math.ceil(y0), math.floor(x1), math.floor(y1)

    def area(self) -> float:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(float(x @ np.roll(y, -1) - y @ np.roll(x, -1)))


@dataclass(frozen=True)
class AnnotationSet:
    subject_id: str
    annotations: tuple[Annotation, ...]
    # messages about ignored elements and dropped polygons
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    def __len__(self) -> int:
        return len(self.annotations)


def clean_polygon(vertices) -> tuple[Optional[tuple], str]:
    """Drop repeated vertices (including a closing copy of the first) and
    reject polygons that are too short or self-intersecting.

    Returns ``(polygon or None, reason)``.
    """
    out = []
    for v in vertices:
        v = (float(v[0]), float(v[1]))
        if not out or v != out[-1]:
            out.append(v)
    while len(out) > 1 and out[-1] == out[0]:
        out.pop()
    if len(out) < 3:
        return None, f"fewer than 3 distinct vertices ({len(out)})"
    if not LinearRing(out).is_simple:
        return None, "self-intersecting"
    return tuple(out), ""


def _attr(el: ET.Element, name: str) -> Optional[str]:
    for k, v in el.attrib.items():
        if k.lower() == name:
            return v
    return None


def _coord(el: ET.Element, name: str) -> float:
    raw = _attr(el, name)
    if raw is None:
        raise MalformedXml(f"<{el.tag}> is missing the {name} attribute")
    try:
        value = float(raw)
    except ValueError:
        raise MalformedXml(f"<{el.tag}> has a non-numeric {name}: {raw!r}") from None
    if not math.isfinite(value):
        raise MalformedXml(f"<{el.tag}> has a non-finite {name}: {raw!r}")
    return value


def _parse_root(doc) -> ET.Element:
    try:
        return ET.fromstring(doc)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc


def _build_set(subject: str, raw: list[tuple[str, list]], notes: list[str]) -> AnnotationSet:
    if not raw:
        raise EmptyAnnotationSet(f"no annotations for subject {subject!r}")
    kept = []
    for i, (label, verts) in enumerate(raw):
        poly, reason = clean_polygon(verts)
        if poly is None:
            notes.append(f"annotation {i} dropped: {reason}")
        else:
            kept.append(Annotation(label, poly))
    if not kept:
        raise EmptyAnnotationSet(f"every annotation of {subject!r} was invalid")
    return AnnotationSet(subject, tuple(kept), tuple(notes))


_CONVERTERS: dict[str, Callable[..., AnnotationSet]] = {}


def register_converter(name: str):
    """Decorator registering ``fn(doc, subject_id=None) -> AnnotationSet``
    under a format name."""

    def deco(fn):
        _CONVERTERS[name] = fn
        return fn

    return deco


def converters() -> list[str]:
    return sorted(_CONVERTERS)


@register_converter("native")
def parse_annotations_xml(doc, subject_id: Optional[str] = None) -> AnnotationSet:
    """Parse the native schema.

    ``subject_id`` overrides (or stands in for a missing) ``subject`` attribute.
    Unknown elements are ignored and listed in ``AnnotationSet.warnings``.

    Raises:
        MalformedXml: unparseable document, wrong root, or bad coordinates.
        EmptyAnnotationSet: no annotation survives parsing and cleanup.
    """
    root = _parse_root(doc)
    if root.tag.lower() != "annotations":
        raise MalformedXml(f"root element must be <annotations>, got <{root.tag}>")
    subject = subject_id if subject_id is not None else _attr(root, "subject")
    if not subject:
        raise MalformedXml("no subject attribute on <annotations> and none given")
    notes, raw = [], []
    for child in root:
        if child.tag.lower() != "annotation":
            notes.append(f"ignored <{child.tag}> under <annotations>")
            continue
        verts = []
        for el in child.iter():
            if el is child:
                continue
            if el.tag.lower() == "vertex":
                verts.append((_coord(el, "x"), _coord(el, "y")))
            elif len(el) == 0:
                notes.append(f"ignored <{el.tag}> in annotation {len(raw)}")
        raw.append((_attr(child, "label") or "", verts))
    return _build_set(subject, raw, notes)


@register_converter("aperio")
def parse_aperio_xml(doc, subject_id: Optional[str] = None) -> AnnotationSet:
    """ImageScope-style ``Annotations/Annotation/Regions/Region/Vertices/Vertex``
    with ``X``/``Y`` attributes; each region becomes one annotation labelled
    with its annotation layer's ``Name``. The subject defaults to ``""``."""
    root = _parse_root(doc)
    if root.tag.lower() != "annotations":
        raise MalformedXml(f"root element must be <Annotations>, got <{root.tag}>")
    raw = []
    for layer in root:
        if layer.tag.lower() != "annotation":
            continue
        label = _attr(layer, "name") or ""
        for region in layer.iter():
            if region.tag.lower() == "region":
                verts = [
                    (_coord(v, "x"), _coord(v, "y"))
                    for v in region.iter()
                    if v.tag.lower() == "vertex"
                ]
                raw.append((label, verts))
    return _build_set(subject_id or "", raw, [])


def parse_annotations(doc, fmt: str = "native", subject_id: Optional[str] = None) -> AnnotationSet:
    try:
        fn = _CONVERTERS[fmt]
    except KeyError:
        raise ValueError(f"unknown annotation format {fmt!r}; known: {converters()}") from None
    return fn(doc, subject_id=subject_id)


def annotations_to_xml(a: AnnotationSet) -> bytes:
    """Write an AnnotationSet in the native schema."""
    root = ET.Element("annotations", subject=a.subject_id)
    for ann in a.annotations:
        el = ET.SubElement(root, "annotation", label=ann.label)
        for x, y in ann.polygon:
            ET.SubElement(el, "vertex", x=repr(x), y=repr(y))
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


# ---- rasterisation -----------------------------------------------------------


def polygon_mask(vertices: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd inclusion of the grid points ``(xs[j], ys[i])``; points on an
    edge count as inside."""
    px = xs[None, :]
    py = ys[:, None]
    inside = np.zeros((len(ys), len(xs)), dtype=bool)
    edge = np.zeros_like(inside)
    n = len(vertices)
    for k in range(n):
        (x1, y1), (x2, y2) = vertices[k], vertices[(k + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        # horizontal edges never cross, so their nan intercepts are masked out
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
        dx, dy = x2 - x1, y2 - y1
        cross = (px - x1) * dy - (py - y1) * dx
        dot = (px - x1) * dx + (py - y1) * dy
        seg2 = dx * dx + dy * dy
        tol = 1e-9 * max(1.0, math.sqrt(seg2))
        edge |= (np.abs(cross) <= tol) & (dot >= -tol) & (dot <= seg2 + tol)
    return inside | edge


def rasterize_mask(
    a: AnnotationSet | Iterable[Annotation],
    width: int,
    height: int,
    origin: tuple[int, int] = (0, 0),
) -> PlanarImage:
    """Binary {0, 255} mask of the union of all polygons.

    Mask pixel ``(row, col)`` is the slide point ``(origin_x + col,
    origin_y + row)``; pixel centres sit on integer coordinates. Zero-area
    polygons are skipped, and parts of a polygon outside the window simply
    fall off the grid.
    """
    anns = a.annotations if isinstance(a, AnnotationSet) else tuple(a)
    ox, oy = origin
    mask = np.zeros((height, width), dtype=bool)
    for ann in anns:
        if ann.area() == 0:
            continue
        bx0, by0, bx1, by1 = ann.pixel_bbox()
        c0, c1 = max(bx0 - ox, 0), min(bx1 - ox, width - 1)
        r0, r1 = max(by0 - oy, 0), min(by1 - oy, height - 1)
        if c0 > c1 or r0 > r1:
            continue
        xs = np.arange(c0, c1 + 1) + ox
        ys = np.arange(r0, r1 + 1) + oy
        mask[r0 : r1 + 1, c0 : c1 + 1] |= polygon_mask(ann.vertices, xs, ys)
    return PlanarImage(mask.astype(np.uint8) * 255, ColorSpace.GRAY)


# ---- patches -----------------------------------------------------------------


class Provenance(str, enum.Enum):
    CENTERED = "centered"
    CORNER_TL = "corner-tl"
    CORNER_TR = "corner-tr"
    CORNER_BL = "corner-bl"
    CORNER_BR = "corner-br"


CORNERS = (Provenance.CORNER_TL, Provenance.CORNER_TR, Provenance.CORNER_BL, Provenance.CORNER_BR)


def patch_id(subject_id: str, annotation_index: int, origin: tuple[int, int], provenance: Provenance) -> str:
    key = f"{subject_id}|{annotation_index}|{origin[0]}|{origin[1]}|{Provenance(provenance).value}"
    return hashlib.sha1(key.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class PatchRecord:
    subject_id: str
    annotation_index: int
    origin: tuple[int, int]
    provenance: Provenance
    image: PlanarImage
    mask: PlanarImage
    patch_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))
        if self.image.data.shape[:2] != self.mask.data.shape[:2]:
            raise ValueError("image and mask sizes differ")
        if self.image.height != self.image.width:
            raise ValueError("patches are square")
        if self.mask.space is not ColorSpace.GRAY or self.mask.data.dtype != np.uint8:
            raise ValueError("mask must be an 8-bit gray plane")
        if not np.isin(self.mask.data, (0, 255)).all():
            raise ValueError("mask values must be 0 or 255")
        if self.provenance is Provenance.CENTERED and not self.mask.data.any():
            raise ValueError("a centred patch must contain annotated pixels")
        if not self.patch_id:
            object.__setattr__(
                self,
                "patch_id",
                patch_id(self.subject_id, self.annotation_index, self.origin, self.provenance),
            )

    def to_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "subject_id": self.subject_id,
            "annotation_index": self.annotation_index,
            "origin": list(self.origin),
            "provenance": self.provenance.value,
        }


def _crop(img: PlanarImage, x0: int, y0: int, size: int) -> PlanarImage:
    return PlanarImage(img.data[y0 : y0 + size, x0 : x0 + size], img.space)


def _clamp_origin(x0: int, y0: int, slide: PlanarImage, size: int) -> tuple[int, int]:
    return min(max(x0, 0), slide.width - size), min(max(y0, 0), slide.height - size)


def _record(slide, a, index, x0, y0, provenance, size) -> PatchRecord:
    return PatchRecord(
        subject_id=a.subject_id,
        annotation_index=index,
        origin=(x0, y0),
        provenance=provenance,
        image=_crop(slide, x0, y0, size),
        mask=rasterize_mask(a, size, size, origin=(x0, y0)),
    )


def _check_slide(slide: PlanarImage, size: int):
    if slide.width < size or slide.height < size:
        raise SlideTooSmall(f"slide {slide.width}x{slide.height} is smaller than the {size}px patch")


def extract_patches(slide: PlanarImage, a: AnnotationSet, patch: int = PATCH_SIZE) -> list[PatchRecord]:
    """One centred patch per annotation.

    The window is centred on the annotation's bounding-box centre (the pixel
    ``floor(centre)`` lands at index ``patch // 2``) and clamped to the slide.
    The mask shows every annotation inside the window. Annotations that cover
    no pixel centre in their window are skipped with a :class:`PatchWarning`.

    Raises:
        SlideTooSmall: the slide is smaller than a patch in either dimension.
    """
    _check_slide(slide, patch)
    out = []
    for i, ann in enumerate(a.annotations):
        x_min, y_min, x_max, y_max = ann.bbox()
        x0 = math.floor((x_min + x_max) / 2) - patch // 2
        y0 = math.floor((y_min + y_max) / 2) - patch // 2
        x0, y0 = _clamp_origin(x0, y0, slide, patch)
        mask = rasterize_mask([ann], patch, patch, origin=(x0, y0))
        if not mask.data.any():
            warnings.warn(f"{a.subject_id} annotation {i} covers no pixel; skipped", PatchWarning)
            continue
        out.append(_record(slide, a, i, x0, y0, Provenance.CENTERED, patch))
    return out


def corner_windows(
    ann: Annotation, slide: PlanarImage, patch: int = PATCH_SIZE, margin: int = CORNER_MARGIN
) -> dict[Provenance, tuple[int, int]]:
    """Window origins placing the annotation's pixel bbox ``margin`` pixels in
    from each patch corner, clamped to the slide.

    Raises:
        AnnotationTooLarge: the bbox is wider or taller than ``patch - 2 * margin``.
    """
    bx0, by0, bx1, by1 = ann.pixel_bbox()
    limit = patch - 2 * margin
    if bx1 - bx0 + 1 > limit or by1 - by0 + 1 > limit:
        raise AnnotationTooLarge(
            f"bbox {bx1 - bx0 + 1}x{by1 - by0 + 1} exceeds {limit}x{limit}"
        )
    left, top = bx0 - margin, by0 - margin
    right, bottom = bx1 + margin - (patch - 1), by1 + margin - (patch - 1)
    raw = {
        Provenance.CORNER_TL: (left, top),
        Provenance.CORNER_TR: (right, top),
        Provenance.CORNER_BL: (left, bottom),
        Provenance.CORNER_BR: (right, bottom),
    }
    return {p: _clamp_origin(x, y, slide, patch) for p, (x, y) in raw.items()}


def corner_translate_augment(
    record: PatchRecord,
    slide: PlanarImage,
    a: AnnotationSet,
    margin: int = CORNER_MARGIN,
) -> list[PatchRecord]:
    """Four re-cropped copies of a centred record with its annotation moved
    to each corner (see :func:`corner_windows`). Windows that clamp onto each
    other still yield four records."""
    if record.provenance is not Provenance.CENTERED:
        raise ValueError("only centred records are augmented")
    size = record.image.width
    _check_slide(slide, size)
    wins = corner_windows(a.annotations[record.annotation_index], slide, size, margin)
    return [_record(slide, a, record.annotation_index, *wins[p], p, size) for p in CORNERS]


def augment_records(
    records: Iterable[PatchRecord], slide: PlanarImage, a: AnnotationSet, margin: int = CORNER_MARGIN
) -> list[PatchRecord]:
    """Corner augmentation over a batch; oversized annotations are skipped
    with a :class:`PatchWarning`."""
    out = []
    for rec in records:
        try:
            out.extend(corner_translate_augment(rec, slide, a, margin))
        except AnnotationTooLarge as exc:
            warnings.warn(f"{rec.patch_id}: {exc}; not augmented", PatchWarning)
    return out


# ---- dataset manifest --------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    splits: dict[str, str]  # subject -> "train" | "test"
    counts: dict[str, int]  # split -> patch count
    params: dict = field(default_factory=dict)
    patches: tuple[dict, ...] = ()

    def __post_init__(self):
        self.check()

    def check(self):
        bad = {s for s in self.splits.values() if s not in ("train", "test")}
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")
        for p in self.patches:
            if self.splits.get(p["subject_id"]) != p["split"]:
                raise OverlappingSplit(f"patch {p['patch_id']} disagrees with its subject's split")

    def subjects(self, split: str) -> list[str]:
        return sorted(s for s, v in self.splits.items() if v == split)

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "splits": {k: self.splits[k] for k in sorted(self.splits)},
            "counts": {
                name: {"subjects": len(self.subjects(name)), "patches": self.counts.get(name, 0)}
                for name in ("train", "test")
            },
            "params": self.params,
            "patches": sorted(self.patches, key=lambda p: p["patch_id"]),
        }

    def to_json(self) -> str:
        self.check()
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def split_by_subject(
    records: Iterable[PatchRecord],
    train_subjects: Iterable[str],
    test_subjects: Iterable[str],
    params: Optional[dict] = None,
) -> DatasetManifest:
    """Assign every record to the split of its subject.

    Raises:
        OverlappingSplit: a subject is listed in both sets.
        UnassignedSubject: a record's subject is in neither set.
    """
    train, test = set(train_subjects), set(test_subjects)
    both = train & test
    if both:
        raise OverlappingSplit(f"subjects in both splits: {sorted(both)}")
    splits = {s: "train" for s in train} | {s: "test" for s in test}
    counts = {"train": 0, "test": 0}
    patches = []
    for rec in records:
        if rec.subject_id not in splits:
            raise UnassignedSubject(f"subject {rec.subject_id!r} is in no split")
        split = splits[rec.subject_id]
        counts[split] += 1
        patches.append({**rec.to_dict(), "split": split})
    return DatasetManifest(splits, counts, dict(params or {}), tuple(patches))


def write_dataset(records: Iterable[PatchRecord], manifest: DatasetManifest, out_dir) -> Path:
    """Write ``<id>_img.png`` / ``<id>_mask.png`` pairs and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_image(rec.image, out / f"{rec.patch_id}_img.png")
        write_image(rec.mask, out / f"{rec.patch_id}_mask.png")
    path = out / "manifest.json"
    path.write_text(manifest.to_json() + "\n")
    return path
