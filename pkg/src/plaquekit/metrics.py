"""Segmentation metrics: Dice, mean absolute surface distance, instance F1
with IoU matching, percentile-bootstrap confidence intervals, and
method x normalisation summary tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyInput, EmptySamples, InvalidThreshold
from .raster import PlanarImage

DEFAULT_IOU_THRESHOLD = 0.1
DEFAULT_RESAMPLES = 1000
# masd() returns this when either surface is empty; such patches are left out
# of the MASD aggregate and counted separately
MASD_UNDEFINED = None


def as_mask(m) -> np.ndarray:
    """Boolean 2-D view of a mask given as an array or a one-plane image."""
    if isinstance(m, PlanarImage):
        m = m.plane(0)
    m = np.asarray(m)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return m > 0


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = as_mask(pred), as_mask(gt)
    if p.shape != g.shape:
        raise DimensionMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def surface_points(mask) -> np.ndarray:
    """``(n, 2)`` row/col coordinates of foreground pixels with a background
    4-neighbour; the outside of the image counts as background."""
    m = as_mask(mask)
    pad = np.pad(m, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return np.argwhere(m & ~interior)


def masd(pred, gt) -> Optional[float]:
    """Mean of the two directed mean surface distances (pixels).

    Returns :data:`MASD_UNDEFINED` if either mask has no surface.
    """
    p, g = _pair(pred, gt)
    sp, sg = surface_points(p), surface_points(g)
    if len(sp) == 0 or len(sg) == 0:
        return MASD_UNDEFINED
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))


@dataclass(frozen=True, eq=False)
class LabeledComponents:
    """Component ids 1..count in raster order of each component's first pixel."""

    labels: np.ndarray
    count: int

    @property
    def sizes(self) -> np.ndarray:
        """Pixel count per component, index 0 is component 1."""
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]

    def pixels(self, i: int) -> np.ndarray:
        return np.argwhere(self.labels == i)


def connected_components(mask, connectivity: int = 8) -> LabeledComponents:
    m = as_mask(mask)
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, count = ndimage.label(m, structure=structure)
    if count:
        # renumber by first pixel in raster order
        _, first = np.unique(labels.ravel(), return_index=True)
        order = np.argsort(first[1:], kind="stable") + 1
        remap = np.zeros(count + 1, dtype=np.int32)
        remap[order] = np.arange(1, count + 1, dtype=np.int32)
        labels = remap[labels]
    return LabeledComponents(labels.astype(np.int32), int(count))


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    # (pred id, gt id, IoU) for matched pairs above threshold
    pairs: tuple[tuple[int, int, float], ...] = ()

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


def iou_matrix(pl: LabeledComponents, gl: LabeledComponents) -> np.ndarray:
    """``IoU[i, j]`` between pred component ``i + 1`` and gt component ``j + 1``."""
    n_p, n_g = pl.count, gl.count
    joint = pl.labels.ravel().astype(np.int64) * (n_g + 1) + gl.labels.ravel()
    inter = np.bincount(joint, minlength=(n_p + 1) * (n_g + 1)).reshape(n_p + 1, n_g + 1)
    inter = inter[1:, 1:]
    union = pl.sizes[:, None] + gl.sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _check_threshold(t: float):
    if not (0 < t <= 1):
        raise InvalidThreshold(f"IoU threshold must be in (0, 1], got {t}")


def match_components(iou: np.ndarray, iou_threshold: float) -> MatchResult:
    """Greedy one-to-one matching in descending IoU (ties by pred id, then gt
    id); a pair is a true positive when its IoU exceeds the threshold."""
    _check_threshold(iou_threshold)
    n_p, n_g = iou.shape
    ii, jj = np.nonzero(iou > iou_threshold)
    order = np.lexsort((jj, ii, -iou[ii, jj]))
    used_p, used_g, pairs = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i + 1, j + 1, float(iou[i, j])))
    tp = len(pairs)
    return MatchResult(tp, n_p - tp, n_g - tp, tuple(pairs))


def instance_f1(
    pred, gt, iou_threshold: float = DEFAULT_IOU_THRESHOLD, connectivity: int = 8
) -> MatchResult:
    """Component-level TP/FP/FN; read ``.f1`` for the score."""
    _check_threshold(iou_threshold)
    p, g = _pair(pred, gt)
    return match_components(
        iou_matrix(connected_components(p, connectivity), connected_components(g, connectivity)),
        iou_threshold,
    )


# ---- bootstrap ---------------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    mean: float
    upper: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lower, self.mean, self.upper)


def bootstrap_ci(
    samples: Sequence[float],
    level: float = 0.95,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    groups: Optional[Sequence] = None,
) -> ConfidenceInterval:
    """Percentile bootstrap CI of the mean.

    With ``groups`` the resampling unit is the group (e.g. subject): whole
    groups are drawn with replacement and the statistic is the mean over all
    samples in the drawn groups. Uses a counter-based Philox generator, so a
    seed fully determines the result. Bounds are widened to include the mean
    if percentile noise would leave it outside.

    Raises:
        EmptySamples: no samples.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptySamples("bootstrap needs at least one sample")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    if (x == x[0]).all():
        v = float(x[0])
        return ConfidenceInterval(v, v, v)
    if groups is None:
        sums, counts = x, np.ones_like(x)
    else:
        keys = np.asarray(groups)
        if keys.shape != x.shape:
            raise ValueError("groups must match samples one to one")
        _, inv = np.unique(keys, return_inverse=True)
        sums = np.bincount(inv, weights=x)
        counts = np.bincount(inv).astype(np.float64)
    mean = float(x.mean()) if groups is None else float(sums.sum() / counts.sum())
    rng = np.random.Generator(np.random.Philox(seed))
    n = len(sums)
    stats = np.empty(resamples)
    # draw in row blocks to bound memory; the stream is the same as one big draw
    step = max(1, 4_000_000 // n)
    for start in range(0, resamples, step):
        rows = min(step, resamples - start)
        idx = rng.integers(0, n, size=(rows, n))
        stats[start : start + rows] = sums[idx].sum(axis=1) / counts[idx].sum(axis=1)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return ConfidenceInterval(min(float(lo), mean), mean, max(float(hi), mean))


# ---- per-patch records and reports -------------------------------------------


@dataclass(frozen=True)
class PatchMetrics:
    patch_id: str
    dice: float
    masd: Optional[float]
    tp: int
    fp: int
    fn: int
    f1: float
    subject_id: str = ""
    method: str = "model"
    normalization: str = "none"

    @classmethod
    def from_dict(cls, d: dict) -> PatchMetrics:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def evaluate_pair(
    pred,
    gt,
    patch_id: str = "",
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    connectivity: int = 8,
    **labels,
) -> PatchMetrics:
    m = instance_f1(pred, gt, iou_threshold, connectivity)
    return PatchMetrics(
        patch_id=patch_id,
        dice=dice_score(pred, gt),
        masd=masd(pred, gt),
        tp=m.tp,
        fp=m.fp,
        fn=m.fn,
        f1=m.f1,
        **labels,
    )


@dataclass(frozen=True)
class ReportParams:
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    resamples: int = DEFAULT_RESAMPLES
    seed: int = 0
    level: float = 0.95
    resample_unit: str = "patch"  # or "subject"
    connectivity: int = 8

    def __post_init__(self):
        _check_threshold(self.iou_threshold)
        if self.resample_unit not in ("patch", "subject"):
            raise ValueError("resample_unit must be 'patch' or 'subject'")


@dataclass(frozen=True)
class ReportRow:
    method: str
    normalization: str
    n_patches: int
    dice: ConfidenceInterval
    masd: Optional[ConfidenceInterval]
    f1: ConfidenceInterval
    masd_undefined: int
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[ReportRow, ...]
    params: ReportParams
    patches: tuple[PatchMetrics, ...] = field(default=())

    def __post_init__(self):
        for r in self.rows:
            for ci in (r.dice, r.masd, r.f1):
                if ci is not None and not ci.lower <= ci.mean <= ci.upper:
                    raise AssertionError(f"unordered CI in row {r.method}/{r.normalization}")

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "params": asdict(self.params),
            "rows": [asdict(r) for r in self.rows],
            "patches": [asdict(p) for p in self.patches],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "normalization", "Dice (%)", "MASD", "F1 (%)"])
        for r in self.rows:
            w.writerow(
                [
                    r.method,
                    r.normalization,
                    format_cell(r.dice, 100.0),
                    format_cell(r.masd, 1.0),
                    format_cell(r.f1, 100.0),
                ]
            )
        return buf.getvalue()


def format_cell(ci: Optional[ConfidenceInterval], scale: float, digits: int = 2) -> str:
    """``"mean [lower, upper]"``, scaled (e.g. to percent); ``"n/a"`` if undefined."""
    if ci is None:
        return "n/a"
    f = lambda v: f"{v * scale:.{digits}f}"
    return f"{f(ci.mean)} [{f(ci.lower)}, {f(ci.upper)}]"


def aggregate_report(per_patch: Iterable[PatchMetrics], params: ReportParams = ReportParams()) -> MetricReport:
    """Mean and bootstrap CI of Dice, MASD and F1 per (method, normalisation).

    Undefined MASD entries are left out of the MASD statistics and counted in
    ``masd_undefined``. Rows are sorted by method, then normalisation.

    Raises:
        EmptyInput: no per-patch records.
    """
    patches = tuple(per_patch)
    if not patches:
        raise EmptyInput("no per-patch metrics to aggregate")
    by_key: dict[tuple[str, str], list[PatchMetrics]] = {}
    for p in patches:
        by_key.setdefault((p.method, p.normalization), []).append(p)
    rows = []
    for (method, norm), ps in sorted(by_key.items()):

        def ci(values, subjects):
            groups = subjects if params.resample_unit == "subject" else None
            return bootstrap_ci(values, params.level, params.resamples, params.seed, groups)

        subjects = [p.subject_id for p in ps]
        defined = [p for p in ps if p.masd is not None]
        rows.append(
            ReportRow(
                method=method,
                normalization=norm,
                n_patches=len(ps),
                dice=ci([p.dice for p in ps], subjects),
                masd=ci([p.masd for p in defined], [p.subject_id for p in defined]) if defined else None,
                f1=ci([p.f1 for p in ps], subjects),
                masd_undefined=len(ps) - len(defined),
                tp=sum(p.tp for p in ps),
                fp=sum(p.fp for p in ps),
                fn=sum(p.fn for p in ps),
            )
        )
    return MetricReport(tuple(rows), params, patches)
