"""Stain normalization: Reinhard, Macenko, Vahadane (SNMF) and colour deconvolution.

All four map a source RGB patch onto the staining style of a fitted
:class:`NormalizationTarget`. The three stain-vector methods share one
reconstruction path (:func:`normalize_to_target`) and differ only in how the
source stain matrix is estimated.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateTarget, InsufficientTissue, SingularBasis
from .raster import (
    ChannelStats,
    ColorSpace,
    PlanarImage,
    _require,
    channel_stats,
    lab_to_rgb_float,
    rgb_to_decorrelated_lab,
    to_optical_density,
    to_uint8,
)

__all__ = [
    "Method",
    "StainParams",
    "StainMatrix",
    "ConcentrationMap",
    "NormalizationTarget",
    "NormalizeResult",
    "SnmfResult",
    "estimate_stains_macenko",
    "estimate_stains_snmf",
    "macenko_basis",
    "snmf",
    "deconvolve",
    "fit_target",
    "reinhard_normalize",
    "normalize_to_target",
    "normalize",
]

MIN_TISSUE_PIXELS = 100
# A target whose RGB channels all have a standard deviation below this
# (8-bit units) is treated as blank.
MIN_TARGET_STD = 1.0
# Fitted stain columns closer than this are considered a single stain.
MIN_STAIN_ANGLE_DEG = 3.0
SINGULAR_ANGLE_RAD = 1e-6
# lαβ std at or below this counts as a flat channel (a constant image gives ~1e-17)
FLAT_STD = 1e-9
# SNMF runs on at most this many tissue pixels (evenly strided) per image.
MAX_SNMF_PIXELS = 100_000


class Method(str, enum.Enum):
    REINHARD = "reinhard"
    MACENKO = "macenko"
    VAHADANE = "vahadane"
    COLOR_DECONV = "colordeconv"


@dataclass(frozen=True)
class StainParams:
    alpha_percentile: float = 1.0
    beta_od_threshold: float = 0.15
    sparsity_lambda: float = 0.1
    max_iters: int = 200
    tol: float = 1e-4
    concentration_percentile: float = 99.0
    background_intensity: float = 255.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> StainParams:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _unit_columns(m: np.ndarray) -> np.ndarray:
    m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    norms = np.linalg.norm(m, axis=0)
    if (norms == 0).any():
        raise SingularBasis("stain vector has no positive component")
    return m / norms


def _order_columns(m: np.ndarray) -> np.ndarray:
    # hematoxylin absorbs red more strongly than DAB or eosin
    return m[:, np.argsort(-m[0], kind="stable")]


@dataclass(frozen=True, eq=False)
class StainMatrix:
    """Unit-norm, non-negative OD stain vectors as columns of a ``3 x k`` matrix,
    ordered hematoxylin-like first."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.array(self.basis, dtype=np.float64, copy=True)
        if b.ndim != 2 or b.shape[0] != 3 or not 1 <= b.shape[1] <= 3:
            raise ValueError(f"stain basis must be 3 x k, got {b.shape}")
        if (b < 0).any():
            raise ValueError("stain vectors must be non-negative")
        if np.abs(np.linalg.norm(b, axis=0) - 1.0).max() > 1e-9:
            raise ValueError("stain vectors must have unit norm")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @classmethod
    def from_vectors(cls, vectors) -> StainMatrix:
        """Clip, normalise and order arbitrary column vectors."""
        return cls(_order_columns(_unit_columns(vectors)))

    @property
    def n_stains(self) -> int:
        return self.basis.shape[1]

    def min_angle(self) -> float:
        """Smallest angle (radians) between any two columns."""
        if self.n_stains < 2:
            return np.pi / 2
        cos = [
            np.clip(self.basis[:, i] @ self.basis[:, j], -1.0, 1.0)
            for i, j in itertools.combinations(range(self.n_stains), 2)
        ]
        return float(np.arccos(max(cos)))


@dataclass(frozen=True, eq=False)
class ConcentrationMap:
    """Per-pixel stain concentrations, ``(height, width, k)``, non-negative."""

    data: np.ndarray

    def __post_init__(self):
        c = np.array(self.data, dtype=np.float64, copy=True)
        if c.ndim != 3:
            raise ValueError("concentration map must be (height, width, k)")
        if not np.isfinite(c).all() or (c < 0).any():
            raise ValueError("concentrations must be finite and non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "data", c)

    def percentile(self, q: float) -> np.ndarray:
        return np.percentile(self.data.reshape(-1, self.data.shape[2]), q, axis=0)


@dataclass(frozen=True, eq=False)
class NormalizationTarget:
    """A fitted reference style, serialisable to JSON."""

    method: Method
    params: StainParams = field(default_factory=StainParams)
    reinhard_stats: Optional[ChannelStats] = None
    stain_matrix: Optional[StainMatrix] = None
    concentration_scale: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        method = Method(self.method)
        object.__setattr__(self, "method", method)
        if method is Method.REINHARD:
            if self.reinhard_stats is None or self.stain_matrix is not None:
                raise ValueError("a Reinhard target carries lαβ statistics only")
        elif self.stain_matrix is None or self.concentration_scale is None or self.reinhard_stats:
            raise ValueError(f"a {method.value} target needs a stain matrix and scales")

    def to_dict(self) -> dict:
        d = {"format": 1, "method": self.method.value, "params": self.params.to_dict()}
        if self.reinhard_stats is not None:
            d["reinhard_stats"] = self.reinhard_stats.to_dict()
        if self.stain_matrix is not None:
            d["stain_matrix"] = self.stain_matrix.basis.tolist()
            d["concentration_scale"] = [float(v) for v in self.concentration_scale]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationTarget:
        return cls(
            method=Method(d["method"]),
            params=StainParams.from_dict(d.get("params", {})),
            reinhard_stats=(
                ChannelStats.from_dict(d["reinhard_stats"]) if "reinhard_stats" in d else None
            ),
            stain_matrix=StainMatrix(np.asarray(d["stain_matrix"])) if "stain_matrix" in d else None,
            concentration_scale=(
                tuple(float(v) for v in d["concentration_scale"])
                if "concentration_scale" in d
                else None
            ),
        )

    @classmethod
    def from_json(cls, text: str) -> NormalizationTarget:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class NormalizeResult:
    image: PlanarImage
    # "ok", "mean-shift-only" (Reinhard, flat source channel) or
    # "passthrough-degenerate" (no usable stain signal, image returned as is)
    status: str = "ok"
    message: str = ""


@dataclass(frozen=True)
class SnmfResult:
    stains: StainMatrix
    concentrations: ConcentrationMap
    objective: tuple[float, ...]
    iterations: int
    converged: bool


def _od_rows(img: PlanarImage, background: float) -> np.ndarray:
    return to_optical_density(img, background).data.reshape(-1, 3)


def _tissue_rows(od: np.ndarray, beta: float) -> np.ndarray:
    tissue = od[np.einsum("ij,ij->i", od, od) > beta * beta]
    if len(tissue) < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(
            f"{len(tissue)} pixels above OD {beta}; need {MIN_TISSUE_PIXELS}"
        )
    return tissue


def macenko_basis(od: np.ndarray, alpha_percentile: float = 1.0) -> np.ndarray:
    """Angle-extreme stain directions of tissue OD rows (``n x 3``), as an
    unordered ``3 x 2`` array."""
    # right singular vectors of od == eigenvectors of its 3x3 Gram matrix
    _, vecs = np.linalg.eigh(od.T @ od)
    plane = vecs[:, [2, 1]]
    for j in range(2):
        pivot = np.argmax(np.abs(plane[:, j]))
        if plane[pivot, j] < 0:
            plane[:, j] = -plane[:, j]
    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha_percentile, 100.0 - alpha_percentile])
    v1 = plane @ np.array([np.cos(lo), np.sin(lo)])
    v2 = plane @ np.array([np.cos(hi), np.sin(hi)])
    return np.stack([v1, v2], axis=1)


def estimate_stains_macenko(
    img: PlanarImage,
    alpha_percentile: float = 1.0,
    beta_od_threshold: float = 0.15,
    background_intensity: float = 255.0,
) -> StainMatrix:
    """Macenko estimate of a two-stain basis.

    Tissue OD vectors are projected onto the plane of their two leading
    right singular vectors; the ``alpha`` and ``100 - alpha`` percentiles of
    the in-plane angle give the two stain directions.
    """
    _require(img, ColorSpace.RGB8)
    od = _tissue_rows(_od_rows(img, background_intensity), beta_od_threshold)
    return StainMatrix.from_vectors(macenko_basis(od, alpha_percentile))


def _snmf_objective(v, w, h, lam):
    r = v - w @ h
    return 0.5 * float(np.einsum("ij,ij->", r, r)) + lam * float(h.sum())


def _nnls_columns(od: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Exact non-negative least squares of each row of ``od`` (n x 3) against
    ``basis`` (3 x k), k at most 3.

    Rows whose unconstrained solution is already non-negative are done (it is
    the global minimiser); the rest are solved by enumerating active sets.
    """
    n, k = len(od), basis.shape[1]
    best = od @ np.linalg.pinv(basis).T
    todo = np.flatnonzero((best < 0).any(axis=1))
    if not len(todo):
        return best
    rest = od[todo]
    sub_best = np.zeros((len(todo), k))
    best_res = np.einsum("ij,ij->i", rest, rest)
    for size in range(1, k):
        for subset in itertools.combinations(range(k), size):
            sub = basis[:, subset]
            coef = rest @ np.linalg.pinv(sub).T
            r = rest - coef @ sub.T
            res = np.einsum("ij,ij->i", r, r)
            better = (coef >= 0).all(axis=1) & (res < best_res)
            sub_best[better] = 0.0
            sub_best[np.ix_(better, subset)] = coef[better]
            best_res[better] = res[better]
    best[todo] = sub_best
    return best


def snmf(
    v: np.ndarray, w0: np.ndarray, sparsity_lambda: float, max_iters: int, tol: float
) -> tuple[np.ndarray, np.ndarray, list[float], int, bool]:
    """Sparse NMF ``V ~ W H`` of a non-negative ``3 x n`` matrix.

    Minimises ``0.5 ||V - WH||_F^2 + lambda * sum(H)`` over ``H >= 0`` and
    non-negative unit-norm columns of ``W``, starting from ``w0``. Each
    iteration applies the multiplicative update to ``H`` and then solves for
    each column of ``W`` exactly with the others fixed (the maximiser of
    ``w . a`` on the non-negative unit sphere is ``a+ / |a+|``). Both steps
    are descent steps, so the objective never increases. Stops when the
    relative decrease falls below ``tol``.

    Returns ``(W, H, objective_history, iterations, converged)``.
    """
    w = _unit_columns(w0)
    eps = 1e-12
    # multiplicative updates cannot leave exact zeros
    h = _nnls_columns(v.T, w).T + 1e-6
    lam = sparsity_lambda
    f = _snmf_objective(v, w, h, lam)
    history = [f]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        h = h * (w.T @ v) / (w.T @ w @ h + lam + eps)
        vh = v @ h.T
        hh = h @ h.T
        for k in range(w.shape[1]):
            a = np.maximum(vh[:, k] - w @ hh[:, k] + w[:, k] * hh[k, k], 0.0)
            norm = np.linalg.norm(a)
            if norm > 0:
                w[:, k] = a / norm
        prev, f = f, _snmf_objective(v, w, h, lam)
        history.append(f)
        if prev - f <= tol * abs(prev):
            converged = True
            break
    return w, h, history, it, converged


def estimate_stains_snmf(
    img: PlanarImage,
    sparsity_lambda: float = 0.1,
    max_iters: int = 200,
    tol: float = 1e-4,
    alpha_percentile: float = 1.0,
    beta_od_threshold: float = 0.15,
    background_intensity: float = 255.0,
) -> SnmfResult:
    """Vahadane stain estimate: sparse NMF (:func:`snmf`) of the tissue OD,
    initialised from the Macenko directions.

    The returned concentration map covers every pixel and is the
    non-negative deconvolution against the fitted basis.
    """
    _require(img, ColorSpace.RGB8)
    od = _tissue_rows(_od_rows(img, background_intensity), beta_od_threshold)
    if len(od) > MAX_SNMF_PIXELS:
        od = od[:: -(-len(od) // MAX_SNMF_PIXELS)]
    w0 = _unit_columns(macenko_basis(od, alpha_percentile))
    if np.arccos(np.clip(w0[:, 0] @ w0[:, 1], -1, 1)) < SINGULAR_ANGLE_RAD:
        raise SingularBasis("initial stain estimate is rank one")
    w, _, history, iterations, converged = snmf(
        od.T, w0, sparsity_lambda, max_iters, tol
    )
    stains = StainMatrix.from_vectors(w)
    return SnmfResult(
        stains=stains,
        concentrations=deconvolve(img, stains, background_intensity),
        objective=tuple(history),
        iterations=iterations,
        converged=converged,
    )


def deconvolve(
    img: PlanarImage, stains: StainMatrix, background_intensity: float = 255.0
) -> ConcentrationMap:
    """Per-pixel non-negative least squares of OD against the stain basis."""
    _require(img, ColorSpace.RGB8)
    if stains.min_angle() < SINGULAR_ANGLE_RAD:
        raise SingularBasis("stain columns are parallel")
    conc = _nnls_columns(_od_rows(img, background_intensity), stains.basis)
    return ConcentrationMap(conc.reshape(img.height, img.width, stains.n_stains))


def _estimate(od: np.ndarray, method: Method, p: StainParams) -> StainMatrix:
    tissue = _tissue_rows(od, p.beta_od_threshold)
    w0 = macenko_basis(tissue, p.alpha_percentile)
    if method is Method.VAHADANE:
        if len(tissue) > MAX_SNMF_PIXELS:
            tissue = tissue[:: -(-len(tissue) // MAX_SNMF_PIXELS)]
        w0, *_ = snmf(tissue.T, w0, p.sparsity_lambda, p.max_iters, p.tol)
    # colour deconvolution estimates the source basis with the Macenko estimator
    return StainMatrix.from_vectors(w0)


def _complement(basis: np.ndarray) -> np.ndarray:
    """3 x 3 matrix of the two stain vectors plus their unit cross product."""
    n = np.cross(basis[:, 0], basis[:, 1])
    return np.column_stack([basis, n / np.linalg.norm(n)])


def _unmix(od: np.ndarray, stains: StainMatrix, method: Method) -> tuple[np.ndarray, np.ndarray]:
    """Split OD rows into stain amounts and the part the stains do not explain.

    Returns ``(amounts, residual)``. For colour deconvolution the amounts come
    from inverting the complemented 3 x 3 stain matrix and may be slightly
    negative, and the residual is the amount along the complement vector;
    otherwise amounts are the non-negative least-squares solution and the
    residual is the leftover OD vector.
    """
    if stains.min_angle() < SINGULAR_ANGLE_RAD:
        raise SingularBasis("stain columns are parallel")
    if method is Method.COLOR_DECONV:
        coef = od @ np.linalg.inv(_complement(stains.basis)).T
        return coef[:, :2], coef[:, 2]
    amounts = _nnls_columns(od, stains.basis)
    return amounts, od - amounts @ stains.basis.T


def _scale(amounts: np.ndarray, q: float) -> np.ndarray:
    # one contiguous row per stain keeps the percentile partition cheap
    return np.percentile(np.maximum(amounts.T, 0.0), q, axis=1)


def fit_target(
    img: PlanarImage, method: Method | str, params: StainParams = StainParams()
) -> NormalizationTarget:
    """Fit a reference style from a target image.

    Raises:
        DegenerateTarget: the image is near-constant, has too little tissue,
            or its two fitted stain vectors collapse onto one direction.
    """
    _require(img, ColorSpace.RGB8)
    method = Method(method)
    if max(channel_stats(img).std) < MIN_TARGET_STD:
        raise DegenerateTarget("target image is near-constant")
    if method is Method.REINHARD:
        stats = channel_stats(rgb_to_decorrelated_lab(img))
        if min(stats.std) <= FLAT_STD:
            raise DegenerateTarget("target has a flat lαβ channel")
        return NormalizationTarget(method, params, reinhard_stats=stats)
    od = _od_rows(img, params.background_intensity)
    try:
        stains = _estimate(od, method, params)
    except (InsufficientTissue, SingularBasis) as exc:
        raise DegenerateTarget(str(exc)) from exc
    if np.degrees(stains.min_angle()) < MIN_STAIN_ANGLE_DEG:
        raise DegenerateTarget("target stain vectors collapse onto one direction")
    amounts, _ = _unmix(od, stains, method)
    scale = _scale(amounts, params.concentration_percentile)
    if (scale <= 0).any():
        raise DegenerateTarget("a target stain has no signal")
    return NormalizationTarget(
        method, params, stain_matrix=stains, concentration_scale=tuple(float(s) for s in scale)
    )


def reinhard_lab(src: PlanarImage, tgt: NormalizationTarget) -> tuple[np.ndarray, bool]:
    """Statistics-matched lαβ image before quantisation, plus a flag telling
    whether any flat channel only received the mean shift."""
    lab = rgb_to_decorrelated_lab(src).data
    src_stats = channel_stats(rgb_to_decorrelated_lab(src))
    out = np.empty_like(lab)
    shift_only = False
    for c in range(3):
        ms, ss = src_stats.mean[c], src_stats.std[c]
        mt, st = tgt.reinhard_stats.mean[c], tgt.reinhard_stats.std[c]
        if ss <= FLAT_STD:
            out[:, :, c] = lab[:, :, c] - ms + mt
            shift_only = True
        else:
            out[:, :, c] = (lab[:, :, c] - ms) * (st / ss) + mt
    return out, shift_only


def reinhard_normalize(src: PlanarImage, tgt: NormalizationTarget) -> NormalizeResult:
    _require(src, ColorSpace.RGB8)
    if tgt.method is not Method.REINHARD:
        raise ValueError(f"expected a Reinhard target, got {tgt.method.value}")
    lab, shift_only = reinhard_lab(src, tgt)
    image = PlanarImage(to_uint8(lab_to_rgb_float(lab)), ColorSpace.RGB8)
    if shift_only:
        return NormalizeResult(image, "mean-shift-only", "source has a flat lαβ channel")
    return NormalizeResult(image)


def normalize_to_target(src: PlanarImage, tgt: NormalizationTarget) -> NormalizeResult:
    """Shared stain-vector path for Macenko, Vahadane and colour deconvolution.

    Estimates the source stains with the target's method, unmixes the source
    OD, rescales each stain so the source's 99th-percentile amount lands on
    the target's, and rebuilds OD with the target basis. The part of the
    source OD that the stain basis does not explain is carried over unchanged
    (along the target's complement vector for colour deconvolution), so a
    target normalised to itself comes back unchanged.

    Near-white sources are returned unchanged with status
    ``"passthrough-degenerate"`` rather than raising.
    """
    _require(src, ColorSpace.RGB8)
    if tgt.method is Method.REINHARD:
        raise ValueError("Reinhard targets go through reinhard_normalize")
    p = tgt.params
    od = _od_rows(src, p.background_intensity)
    try:
        stains = _estimate(od, tgt.method, p)
        amounts, residual = _unmix(od, stains, tgt.method)
    except (InsufficientTissue, SingularBasis) as exc:
        return NormalizeResult(src, "passthrough-degenerate", str(exc))
    src_scale = _scale(amounts, p.concentration_percentile)
    tgt_scale = np.asarray(tgt.concentration_scale)
    factor = np.where(src_scale > 0, tgt_scale / np.where(src_scale > 0, src_scale, 1.0), 1.0)
    out = (amounts * factor) @ tgt.stain_matrix.basis.T
    if tgt.method is Method.COLOR_DECONV:
        out += residual[:, None] * _complement(tgt.stain_matrix.basis)[:, 2]
    else:
        out += residual
    rgb = to_uint8(p.background_intensity * 10.0 ** (-out))
    return NormalizeResult(PlanarImage(rgb.reshape(src.data.shape), ColorSpace.RGB8))


def normalize(src: PlanarImage, tgt: NormalizationTarget) -> NormalizeResult:
    """Dispatch on the target's method."""
    if tgt.method is Method.REINHARD:
        return reinhard_normalize(src, tgt)
    return normalize_to_target(src, tgt)
