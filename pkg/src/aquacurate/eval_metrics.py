"""Depth and surface-normal benchmark metrics.

Depth: AbsRel, SqRel, RMSE, mean |log10| error and threshold accuracy
``max(d/d*, d*/d) < 1.25**k``.  Normals: mean, median and RMS angular error
in degrees plus the fraction of pixels under 11.25, 22.5 and 30 degrees.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DegenerateAlignmentError, DimensionError, NormalizationError, ParameterError, PositivityError
from .grid_core import as_single_channel
from .io import DEPTH_EXTENSIONS, read_depth, read_mask, read_normal_png
from .losses import align_lstsq

logger = logging.getLogger(__name__)

DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
ANGLE_THRESHOLDS = (11.25, 22.5, 30.0)
ALIGN_MODES = ("none", "lstsq", "median")
UNIT_TOL = 1e-3


@dataclass(frozen=True)
class DepthMetricRecord:
    abs_rel: float
    sq_rel: float
    rmse: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int


@dataclass(frozen=True)
class NormalMetricRecord:
    mean_deg: float
    median_deg: float
    rms_deg: float
    acc_11_25: float
    acc_22_5: float
    acc_30: float
    pixel_count: int


def lower_median(values) -> float:
    """Median that takes the lower middle element for even counts."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ParameterError("median of an empty set")
    return float(v[(v.size - 1) // 2])


def _mask_for(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise DimensionError(f"mask {mask.shape} does not match grid {tuple(shape)}")
    return mask


def align_for_eval(pred, gt, mask=None, mode: str = "lstsq") -> np.ndarray:
    """Bring ``pred`` onto the scale of ``gt`` before scoring."""
    pred = as_single_channel(pred)
    gt = as_single_channel(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = _mask_for(pred.shape, mask)
    if mode == "none":
        return pred.copy()
    if mode == "lstsq":
        return align_lstsq(pred, gt, mask).apply(pred)
    if mode == "median":
        mp = lower_median(pred[mask])
        if mp == 0:
            raise DegenerateAlignmentError("median of the prediction is zero; cannot median-scale")
        return pred * (lower_median(gt[mask]) / mp)
    raise ParameterError(f"align mode must be one of {ALIGN_MODES}, got {mode!r}")


def depth_metrics(pred, gt, mask=None, thresholds=DELTA_THRESHOLDS) -> DepthMetricRecord:
    pred = as_single_channel(pred)
    gt = as_single_channel(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = _mask_for(pred.shape, mask)
    p = pred[mask]
    g = gt[mask]
    if p.size == 0:
        raise ParameterError("no valid pixels to evaluate")
    if np.any(g <= 0):
        raise PositivityError("ground truth must be > 0 on the mask (abs_rel, sq_rel, log10, delta need it)")
    if np.any(p <= 0):
        raise PositivityError("prediction must be > 0 on the mask (log10 and delta need it)")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    deltas = [float(np.mean(ratio < t)) for t in thresholds]
    return DepthMetricRecord(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=deltas[0],
        delta2=deltas[1],
        delta3=deltas[2],
        pixel_count=int(p.size),
    )


def angular_errors(pred, gt, mask=None) -> np.ndarray:
    """Per-pixel angle in degrees between two unit normal fields, on the mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise DimensionError(f"normal fields must share an (H, W, 3) shape, got {pred.shape} and {gt.shape}")
    mask = _mask_for(pred.shape[:2], mask)
    p = pred[mask]
    g = gt[mask]
    for name, v in (("prediction", p), ("ground truth", g)):
        norms = np.linalg.norm(v, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise NormalizationError(f"{name} normals are not unit length (max deviation "
                                     f"{float(np.abs(norms - 1.0).max()):.3g})")
    dots = np.clip(np.sum(p * g, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def normal_metrics_from_angles(angles) -> NormalMetricRecord:
    a = np.asarray(angles, dtype=np.float64)
    if a.size == 0:
        raise ParameterError("no valid pixels to evaluate")
    accs = [float(np.mean(a < t)) for t in ANGLE_THRESHOLDS]
    return NormalMetricRecord(
        mean_deg=float(a.mean()),
        median_deg=lower_median(a),
        rms_deg=float(np.sqrt(np.mean(a * a))),
        acc_11_25=accs[0],
        acc_22_5=accs[1],
        acc_30=accs[2],
        pixel_count=int(a.size),
    )


def normal_metrics(pred, gt, mask=None) -> NormalMetricRecord:
    return normal_metrics_from_angles(angular_errors(pred, gt, mask))


def _weighted(records, name, weights):
    return math.fsum(getattr(r, name) * w for r, w in zip(records, weights)) / math.fsum(weights)


def aggregate_depth(records, per_pixel: bool = False) -> DepthMetricRecord:
    """Dataset summary: uniform mean over images, or pixel-pooled.

    Pixel pooling weights each mean by its pixel count; RMSE pools the
    squared errors before the root.
    """
    if not records:
        raise ParameterError("nothing to aggregate")
    w = [r.pixel_count if per_pixel else 1.0 for r in records]
    out = {f.name: _weighted(records, f.name, w) for f in fields(DepthMetricRecord) if f.name != "pixel_count"}
    if per_pixel:
        out["rmse"] = math.sqrt(math.fsum(r.rmse ** 2 * r.pixel_count for r in records) / math.fsum(w))
    return DepthMetricRecord(**out, pixel_count=sum(r.pixel_count for r in records))


def aggregate_normals(records, per_pixel: bool = False, angles=None) -> NormalMetricRecord:
    """As :func:`aggregate_depth`; the pooled median needs the raw ``angles``."""
    if not records:
        raise ParameterError("nothing to aggregate")
    w = [r.pixel_count if per_pixel else 1.0 for r in records]
    out = {f.name: _weighted(records, f.name, w) for f in fields(NormalMetricRecord) if f.name != "pixel_count"}
    if per_pixel:
        out["rms_deg"] = math.sqrt(math.fsum(r.rms_deg ** 2 * r.pixel_count for r in records) / math.fsum(w))
        if angles is None:
            raise ParameterError("pixel-pooled median requires the per-image angle arrays")
        out["median_deg"] = lower_median(np.concatenate([np.ravel(a) for a in angles]))
    return NormalMetricRecord(**out, pixel_count=sum(r.pixel_count for r in records))


def _match_by_stem(pred_dir: Path, gt_dir: Path, extensions) -> list:
    def index(d):
        out = {}
        for p in sorted(d.iterdir()):
            if p.is_file() and p.suffix.lower() in extensions:
                out.setdefault(p.stem, p)
        return out

    preds = index(pred_dir)
    gts = index(gt_dir)
    missing = sorted(set(gts) - set(preds))
    if missing:
        logger.warning("%d ground-truth files have no prediction, e.g. %s", len(missing), missing[0])
    return [(stem, preds[stem], gts[stem]) for stem in sorted(set(preds) & set(gts))]


def _load_mask(mask_dir, stem):
    if mask_dir is None:
        return None
    for ext in (".png", ".pfm"):
        p = Path(mask_dir) / f"{stem}{ext}"
        if p.exists():
            return read_mask(p)
    return None


def evaluate_depth_dirs(pred_dir, gt_dir, mask_dir=None, align: str = "lstsq", per_pixel: bool = False,
                        workers: int = 1) -> dict:
    """Score every prediction against the ground-truth file with the same stem.

    Without a mask file, valid pixels are those with finite ``gt > 0``.
    Returns ``{"rows": [...], "aggregate": {...}}``.
    """
    pairs = _match_by_stem(Path(pred_dir), Path(gt_dir), DEPTH_EXTENSIONS)

    def one(item):
        stem, pp, gp = item
        pred = read_depth(pp).astype(np.float64)
        gt = read_depth(gp).astype(np.float64)
        mask = _load_mask(mask_dir, stem)
        valid = np.isfinite(gt) & (gt > 0)
        mask = valid if mask is None else (mask & valid)
        aligned = align_for_eval(pred, gt, mask, align)
        return stem, depth_metrics(aligned, gt, mask)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, pairs))
    return _table(results, aggregate_depth([r for _, r in results], per_pixel) if results else None)


def evaluate_normal_dirs(pred_dir, gt_dir, mask_dir=None, per_pixel: bool = False, workers: int = 1) -> dict:
    pairs = _match_by_stem(Path(pred_dir), Path(gt_dir), (".png",))

    def one(item):
        stem, pp, gp = item
        angles = angular_errors(read_normal_png(pp), read_normal_png(gp), _load_mask(mask_dir, stem))
        return stem, normal_metrics_from_angles(angles), angles

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, pairs))
    agg = None
    if results:
        agg = aggregate_normals([r for _, r, _ in results], per_pixel, [a for _, _, a in results])
    return _table([(s, r) for s, r, _ in results], agg)


def _table(results, aggregate) -> dict:
    rows = [{"image": stem, **asdict(rec)} for stem, rec in results]
    if aggregate is not None:
        rows.append({"image": "aggregate", **asdict(aggregate)})
    return {"rows": rows}
