"""Synthetic stained images and annotated slides for tests, demos and fixtures.

Images are built in optical-density space from a known stain basis, so stain
estimators can be checked against ground truth.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .patches import Annotation, AnnotationSet, rasterize_mask
from .raster import ColorSpace, PlanarImage, to_uint8

HEMATOXYLIN = np.array([0.65, 0.70, 0.29])
DAB = np.array([0.27, 0.57, 0.78])
EOSIN = np.array([0.07, 0.99, 0.11])


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def h_dab_basis() -> np.ndarray:
    return np.stack([unit(HEMATOXYLIN), unit(DAB)], axis=1)


def random_basis(rng: np.random.Generator, jitter: float = 0.08) -> np.ndarray:
    """H-DAB basis with each column randomly perturbed, kept non-negative."""
    cols = []
    for v in (HEMATOXYLIN, DAB):
        cols.append(unit(np.clip(unit(v) + rng.normal(0, jitter, 3), 0.02, None)))
    b = np.stack(cols, axis=1)
    return b[:, np.argsort(-b[0], kind="stable")]


def od_to_rgb(od: np.ndarray, background: float = 255.0) -> PlanarImage:
    return PlanarImage(to_uint8(background * 10.0 ** (-od)), ColorSpace.RGB8)


def sparse_concentrations(
    rng: np.random.Generator,
    shape: tuple[int, int],
    k: int = 2,
    mixed_fraction: float = 0.2,
    background_fraction: float = 0.1,
) -> np.ndarray:
    """Sparse concentrations: most pixels carry a single stain, ``mixed_fraction``
    carry all of them, and ``background_fraction`` are blank."""
    h, w = shape
    n = h * w
    c = np.zeros((n, k))
    mixed = rng.random(n) < mixed_fraction
    c[mixed] = rng.uniform(0.15, 1.2, size=(mixed.sum(), k))
    which = rng.integers(0, k, size=n)
    single = ~mixed
    c[single, which[single]] = rng.uniform(0.15, 1.2, size=single.sum())
    c[rng.random(n) < background_fraction] = 0.0
    return c.reshape(h, w, k)


def two_stain_image(
    basis: np.ndarray, shape=(128, 128), rng: np.random.Generator | None = None
) -> tuple[PlanarImage, np.ndarray]:
    """RGB image whose OD is exactly ``basis @ C`` before 8-bit quantisation."""
    rng = rng if rng is not None else np.random.default_rng(0)
    conc = sparse_concentrations(rng, shape, basis.shape[1])
    return od_to_rgb(conc @ basis.T), conc


def plaque_polygon(
    rng: np.random.Generator, center: tuple[float, float], radius: float, n: int = 24
) -> tuple[tuple[float, float], ...]:
    """Irregular star-shaped (hence simple) polygon around ``center``."""
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False)
    # smooth radial wobble from a few low-order harmonics
    wobble = np.zeros(n)
    for k in (2, 3, 5):
        wobble += rng.uniform(0, 0.12) * np.cos(k * angles + rng.uniform(0, 2 * np.pi))
    r = radius * (1 + wobble)
    cx, cy = center
    return tuple(
        (round(float(cx + ri * np.cos(a)), 2), round(float(cy + ri * np.sin(a)), 2))
        for ri, a in zip(r, angles)
    )


def synthetic_slide(
    rng: np.random.Generator,
    size: tuple[int, int] = (768, 768),
    n_plaques: int = 6,
    subject_id: str = "S00",
    radius_range: tuple[float, float] = (8.0, 30.0),
    edge_gap: float = 0.0,
    basis: np.ndarray | None = None,
) -> tuple[PlanarImage, AnnotationSet]:
    """H-DAB slide: pale hematoxylin tissue with nuclei, plus ``n_plaques``
    dark-brown DAB plaques whose outlines form the annotation set.

    Plaques do not overlap. ``edge_gap`` keeps plaque centres that far from
    the slide border (plus the radius). ``basis`` (3x2, hematoxylin then
    DAB) overrides the reference stain colours.
    """
    h, w = size
    basis = h_dab_basis() if basis is None else np.asarray(basis, float)
    # tissue background: smooth hematoxylin haze
    haze = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 12)
    h_conc = 0.18 + 0.06 * haze / (haze.std() + 1e-12)
    # nuclei: small dark-blue blobs
    nuclei = np.zeros((h, w))
    count = int(h * w / 900)
    ys, xs = rng.integers(0, h, count), rng.integers(0, w, count)
    nuclei[ys, xs] = 1.0
    yy, xx = np.mgrid[-2:3, -2:3]
    nuclei = ndimage.grey_dilation(nuclei, footprint=np.hypot(yy, xx) <= 2.3)
    h_conc += 0.45 * ndimage.gaussian_filter(nuclei, 1.0)

    anns, centers = [], []
    for _ in range(200 * n_plaques):
        if len(anns) == n_plaques:
            break
        r = rng.uniform(*radius_range)
        pad = 1.2 * r + edge_gap + 2
        if w - pad <= pad or h - pad <= pad:
            continue
        c = (rng.uniform(pad, w - pad), rng.uniform(pad, h - pad))
        if any(np.hypot(c[0] - o[0], c[1] - o[1]) < 1.3 * (r + orad) for o, orad in centers):
            continue
        centers.append((c, r))
        anns.append(Annotation("plaque", plaque_polygon(rng, c, r)))
    if len(anns) < n_plaques:
        raise ValueError("could not place the requested plaques without overlap")
    a = AnnotationSet(subject_id, tuple(anns))

    inside = rasterize_mask(a, w, h).plane() > 0
    # DAB ~1.2 keeps the green channel near 50 inside plaques
    dab = ndimage.gaussian_filter(inside.astype(float), 1.0) * rng.uniform(1.05, 1.3)
    dab *= 1 + 0.08 * ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 2) * 3
    conc = np.stack([np.clip(h_conc, 0, None), np.clip(dab, 0, None)], axis=-1)
    od = conc @ basis.T + rng.normal(0, 0.01, (h, w, 3))
    return od_to_rgb(np.clip(od, 0, None)), a
