import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from plaquekit.errors import (
    AnnotationTooLarge,
    EmptyAnnotationSet,
    MalformedXml,
    OverlappingSplit,
    SlideTooSmall,
    UnassignedSubject,
)
from plaquekit.patches import (
    Annotation,
    AnnotationSet,
    PatchWarning,
    Provenance,
    annotations_to_xml,
    augment_records,
    clean_polygon,
    converters,
    corner_translate_augment,
    extract_patches,
    parse_annotations,
    parse_annotations_xml,
    rasterize_mask,
    split_by_subject,
    write_dataset,
)
from plaquekit.raster import ColorSpace, PlanarImage, read_image
from plaquekit.synthetic import plaque_polygon, synthetic_slide


def square(x0, y0, x1, y1, label="plaque"):
    return Annotation(label, ((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


def brute_mask(polys, width, height, origin=(0, 0)):
    """Boundary-inclusive point-in-polygon over every pixel centre, via shapely."""
    out = np.zeros((height, width), bool)
    shapes = [Polygon(p) for p in polys]
    for r in range(height):
        for c in range(width):
            pt = Point(origin[0] + c, origin[1] + r)
            out[r, c] = any(s.area > 0 and s.covers(pt) for s in shapes)
    return out


def slide_of(size, value=200):
    return PlanarImage.rgb(np.full((size[1], size[0], 3), value))


def ramp_slide(w, h):
    """Slide whose pixels encode their own coordinates, to check crops."""
    y, x = np.mgrid[0:h, 0:w]
    return PlanarImage.rgb(np.stack([x % 256, y % 256, (x // 256) * 16 + y // 256], axis=-1))


# ---- parsing -----------------------------------------------------------------

TRIANGLE = b"""<?xml version="1.0"?>
<annotations subject="S01">
  <annotation label="plaque">
    <vertex x="1" y="1"/><vertex X="10" Y="1"/><vertex x="5.5" y="9"/>
  </annotation>
</annotations>"""


def test_parse_minimal_triangle():
    a = parse_annotations_xml(TRIANGLE)
    assert a.subject_id == "S01" and len(a) == 1
    assert a.annotations[0].polygon == ((1, 1), (10, 1), (5.5, 9))
    assert a.annotations[0].label == "plaque"
    assert a.warnings == ()


def test_parse_empty_document():
    with pytest.raises(EmptyAnnotationSet):
        parse_annotations_xml(b'<annotations subject="S"/>')


@pytest.mark.parametrize(
    "doc",
    [
        b"<annotations subject='S'><annotation>",
        b"<polygons subject='S'/>",
        b"<annotations subject='S'><annotation><vertex x='a' y='1'/></annotation></annotations>",
        b"<annotations subject='S'><annotation><vertex x='1'/></annotation></annotations>",
        b"<annotations><annotation><vertex x='1' y='1'/></annotation></annotations>",
    ],
)
def test_parse_malformed(doc):
    with pytest.raises(MalformedXml):
        parse_annotations_xml(doc)


def test_parse_unknown_elements_warn():
    doc = b"""<annotations subject="S"><meta/>
      <annotation label="p"><note/><vertices>
        <vertex x="0" y="0"/><vertex x="4" y="0"/><vertex x="4" y="4"/></vertices>
      </annotation></annotations>"""
    a = parse_annotations_xml(doc)
    assert len(a) == 1 and len(a.annotations[0].polygon) == 3
    assert len(a.warnings) == 2


def test_cleanup_drops_bad_polygons():
    doc = b"""<annotations subject="S">
      <annotation><vertex x="0" y="0"/><vertex x="0" y="0"/><vertex x="3" y="0"/></annotation>
      <annotation><vertex x="0" y="0"/><vertex x="4" y="4"/><vertex x="4" y="0"/><vertex x="0" y="4"/></annotation>
      <annotation><vertex x="0" y="0"/><vertex x="4" y="0"/><vertex x="4" y="4"/><vertex x="0" y="0"/></annotation>
    </annotations>"""
    a = parse_annotations_xml(doc)
    assert len(a) == 1
    assert a.annotations[0].polygon == ((0, 0), (4, 0), (4, 4))
    assert len(a.warnings) == 2


def test_cleanup_rejects_collinear_backtrack():
    poly, reason = clean_polygon([(0, 0), (4, 0), (2, 0)])
    assert poly is None and reason


def test_parse_many_polygons_count_preserved():
    rng = np.random.default_rng(0)
    anns = [
        Annotation("plaque", plaque_polygon(rng, (rng.uniform(50, 9950), rng.uniform(50, 9950)), 12))
        for _ in range(4000)
    ]
    doc = annotations_to_xml(AnnotationSet("S09", tuple(anns)))
    back = parse_annotations_xml(doc)
    assert len(back) == 4000
    assert back.annotations == tuple(anns)


def test_aperio_converter():
    doc = b"""<Annotations><Annotation Id="1" Name="plaques"><Regions>
      <Region Id="1"><Vertices><Vertex X="0" Y="0"/><Vertex X="5" Y="0"/><Vertex X="5" Y="5"/></Vertices></Region>
      <Region Id="2"><Vertices><Vertex X="10" Y="10"/><Vertex X="15" Y="10"/><Vertex X="15" Y="15"/></Vertices></Region>
    </Regions></Annotation></Annotations>"""
    assert "aperio" in converters() and "native" in converters()
    a = parse_annotations(doc, "aperio", subject_id="S3")
    assert a.subject_id == "S3" and len(a) == 2 and a.annotations[0].label == "plaques"
    with pytest.raises(ValueError):
        parse_annotations(doc, "nope")


# ---- rasterisation -----------------------------------------------------------


def test_rasterize_rectangle_16_pixels():
    m = rasterize_mask(AnnotationSet("S", (square(2, 2, 5, 5),)), 8, 8).plane()
    assert (m == 255).sum() == 16
    assert set(np.unique(m)) == {0, 255}
    assert m[2:6, 2:6].all()
    assert np.array_equal(m > 0, brute_mask([square(2, 2, 5, 5).polygon], 8, 8))


def test_rasterize_zero_area_is_empty():
    line = Annotation("p", ((1, 1), (4, 4), (6, 6)))
    assert not rasterize_mask([line], 8, 8).plane().any()


def test_rasterize_union_is_binary():
    m = rasterize_mask([square(1, 1, 5, 5), square(3, 3, 7, 7)], 10, 10).plane()
    assert set(np.unique(m)) == {0, 255}
    assert (m > 0).sum() == 25 + 25 - 9


def test_rasterize_clips_out_of_bounds():
    m = rasterize_mask([square(-5, -5, 2, 2)], 6, 6).plane()
    assert (m > 0).sum() == 9


def test_rasterize_origin_offset():
    ann = square(102, 52, 105, 55)
    m = rasterize_mask([ann], 8, 8, origin=(100, 50)).plane()
    assert np.array_equal(m > 0, rasterize_mask([square(2, 2, 5, 5)], 8, 8).plane() > 0)


polygons = st.lists(
    st.tuples(st.floats(-3, 19, allow_nan=False), st.floats(-3, 19, allow_nan=False)),
    min_size=3,
    max_size=7,
)


@settings(max_examples=60, deadline=None)
@given(polygons, st.integers(-3, 3), st.integers(-3, 3))
def test_rasterize_matches_brute_force(verts, ox, oy):
    poly, _ = clean_polygon([(round(x, 1), round(y, 1)) for x, y in verts])
    if poly is None:
        return
    got = rasterize_mask([Annotation("p", poly)], 16, 16, origin=(ox, oy)).plane() > 0
    assert np.array_equal(got, brute_mask([poly], 16, 16, origin=(ox, oy)))


def test_rasterize_even_odd_hole():
    # a self-overlapping outline that winds twice around the centre leaves it empty
    star = Annotation("p", ((8, 0), (10, 14), (0, 5), (16, 5), (6, 14)))
    m = rasterize_mask([star], 17, 17).plane() > 0
    assert not m[8, 8]
    assert m[3, 8]


# ---- extraction --------------------------------------------------------------


def test_extract_centered_plaque():
    slide = ramp_slide(600, 500)
    a = AnnotationSet("S", (square(290, 240, 309, 259),))
    (rec,) = extract_patches(slide, a)
    assert rec.provenance is Provenance.CENTERED
    assert rec.origin == (299 - 128, 249 - 128)
    ys, xs = np.nonzero(rec.mask.plane())
    assert (xs.min() + xs.max()) / 2 == pytest.approx(127.5, abs=1)
    assert (ys.min() + ys.max()) / 2 == pytest.approx(127.5, abs=1)
    assert rec.image.data.tobytes() == slide.data[121:377, 171:427].tobytes()


def test_extract_clamps_at_left_edge():
    a = AnnotationSet("S", (square(10, 200, 30, 220),))
    (rec,) = extract_patches(ramp_slide(600, 500), a)
    assert rec.origin[0] == 0
    xs = np.nonzero(rec.mask.plane())[1]
    assert xs.min() == 10


def test_extract_slide_too_small():
    with pytest.raises(SlideTooSmall):
        extract_patches(slide_of((255, 400)), AnnotationSet("S", (square(1, 1, 5, 5),)))


@pytest.mark.parametrize("seed", range(3))
def test_extract_count_and_masks(seed):
    rng = np.random.default_rng(seed)
    slide, a = synthetic_slide(rng, (640, 640), n_plaques=5 + seed)
    recs = extract_patches(slide, a)
    assert len(recs) == len(a)
    for r in recs:
        assert r.image.data.shape == (256, 256, 3)
        assert r.mask.data.shape == (256, 256, 1)
        assert set(np.unique(r.mask.plane())) == {0, 255}


def test_extract_skips_annotation_without_pixels():
    tiny = Annotation("p", ((10.2, 10.2), (10.8, 10.2), (10.5, 10.7)))
    with pytest.warns(PatchWarning):
        recs = extract_patches(slide_of((300, 300)), AnnotationSet("S", (tiny, square(50, 50, 60, 60))))
    assert [r.annotation_index for r in recs] == [1]


def test_extraction_is_reproducible():
    slide, a = synthetic_slide(np.random.default_rng(4), (512, 512), n_plaques=4)
    r1, r2 = extract_patches(slide, a), extract_patches(slide, a)
    assert [r.patch_id for r in r1] == [r.patch_id for r in r2]
    assert all(x.image == y.image and x.mask == y.mask for x, y in zip(r1, r2))
    assert len({r.patch_id for r in r1}) == len(r1)


# ---- augmentation ------------------------------------------------------------


def test_corner_augment_geometry():
    slide = ramp_slide(1000, 1000)
    a = AnnotationSet("S", (square(490, 490, 509, 509),))
    (rec,) = extract_patches(slide, a)
    out = corner_translate_augment(rec, slide, a)
    assert [r.provenance for r in out] == [
        Provenance.CORNER_TL,
        Provenance.CORNER_TR,
        Provenance.CORNER_BL,
        Provenance.CORNER_BR,
    ]
    expect = {
        Provenance.CORNER_TL: (4, 4),
        Provenance.CORNER_TR: (4, 251),
        Provenance.CORNER_BL: (251, 4),
        Provenance.CORNER_BR: (251, 251),
    }
    for r in out:
        ys, xs = np.nonzero(r.mask.plane())
        top, left = expect[r.provenance]
        if r.provenance in (Provenance.CORNER_TL, Provenance.CORNER_TR):
            assert ys.min() == 4
        else:
            assert ys.max() == 251
        if r.provenance in (Provenance.CORNER_TL, Provenance.CORNER_BL):
            assert xs.min() == 4
        else:
            assert xs.max() == 251
        x0, y0 = r.origin
        # re-cropped from the slide, not padded
        assert r.image.data.tobytes() == slide.data[y0 : y0 + 256, x0 : x0 + 256].tobytes()
    assert len({r.patch_id for r in out}) == 4


def test_corner_augment_near_corner_keeps_count():
    slide = slide_of((300, 300))
    a = AnnotationSet("S", (square(1, 1, 20, 20),))
    (rec,) = extract_patches(slide, a)
    out = corner_translate_augment(rec, slide, a)
    assert len(out) == 4
    assert len({r.origin for r in out}) < 4
    assert len({r.patch_id for r in out}) == 4


def test_corner_augment_too_large():
    slide = slide_of((600, 600))
    big = AnnotationSet("S", (square(100, 100, 348, 200), square(400, 400, 420, 420)))
    recs = extract_patches(slide, big)
    with pytest.raises(AnnotationTooLarge):
        corner_translate_augment(recs[0], slide, big)
    with pytest.warns(PatchWarning):
        out = augment_records(recs, slide, big)
    assert len(out) == 4
    # a 248-pixel bbox just fits
    ok = AnnotationSet("S", (square(100, 100, 347, 200),))
    assert len(corner_translate_augment(extract_patches(slide, ok)[0], slide, ok)) == 4


@pytest.mark.parametrize("seed", range(3))
def test_augmentation_is_fourfold(seed):
    slide, a = synthetic_slide(np.random.default_rng(10 + seed), (700, 700), n_plaques=6)
    recs = extract_patches(slide, a)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        aug = augment_records(recs, slide, a)
    assert len(aug) == 4 * len(recs)
    for r in aug:
        assert r.mask.data.shape == (256, 256, 1)
        assert set(np.unique(r.mask.plane())) <= {0, 255}


# ---- splits ------------------------------------------------------------------


def fifteen_subject_records():
    recs = []
    for s in range(15):
        slide, a = synthetic_slide(np.random.default_rng(s), (300, 300), n_plaques=2, subject_id=f"S{s:02d}")
        recs += extract_patches(slide, a)
    return recs


def test_split_12_3():
    recs = fifteen_subject_records()
    subjects = [f"S{s:02d}" for s in range(15)]
    m = split_by_subject(recs, subjects[:12], subjects[12:], {"patch": 256, "augment": False, "seed": 0})
    d = json.loads(m.to_json())
    assert d["counts"]["train"] == {"subjects": 12, "patches": 24}
    assert d["counts"]["test"] == {"subjects": 3, "patches": 6}
    train = {p["subject_id"] for p in d["patches"] if p["split"] == "train"}
    test = {p["subject_id"] for p in d["patches"] if p["split"] == "test"}
    assert not train & test and len(train) == 12 and len(test) == 3


def test_split_overlap_and_unassigned():
    recs = fifteen_subject_records()[:4]
    with pytest.raises(OverlappingSplit):
        split_by_subject(recs, ["S00", "S01"], ["S01"])
    with pytest.raises(UnassignedSubject):
        split_by_subject(recs, ["S00"], [])


def test_split_empty_test_set():
    recs = fifteen_subject_records()[:4]
    m = split_by_subject(recs, ["S00", "S01"], [])
    assert m.counts == {"train": 4, "test": 0}


def test_write_dataset(tmp_path):
    slide, a = synthetic_slide(np.random.default_rng(1), (400, 400), n_plaques=2)
    recs = extract_patches(slide, a)
    m = split_by_subject(recs, [a.subject_id], [])
    write_dataset(recs, m, tmp_path)
    for r in recs:
        assert read_image(tmp_path / f"{r.patch_id}_img.png") == r.image
        assert read_image(tmp_path / f"{r.patch_id}_mask.png") == r.mask
    first = (tmp_path / "manifest.json").read_bytes()
    write_dataset(recs, m, tmp_path)
    assert (tmp_path / "manifest.json").read_bytes() == first
