"""Depth/normal pseudo-label scoring and best-pair selection.

Each teacher model contributes one depth map and one normal map per RGB
image.  Both maps are scored against the image with edge, variance,
complexity and sharpness statistics, the scores are combined linearly and
the highest-scoring pair is copied to the output folder.
"""

from __future__ import annotations

import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import CandidateSet, discover_pairs
from .errors import AquaCurateError, DimensionError, EmptyCandidatesError, ParameterError
from .grid_core import (
    as_single_channel,
    box_local_variance,
    edge_mask,
    luminance,
    minmax_normalize,
    normalize_vectors,
    sobel_gradients,
)
from .io import read_depth, read_normal_png, read_rgb

logger = logging.getLogger(__name__)

EDGE_PERCENTILE = 90.0
VARIANCE_WINDOW = 11
REPORT_NAME = "dnesa_report.json"


@dataclass(frozen=True)
class DepthQuality:
    edge_consistency: float
    local_variance: float
    complexity: float
    sharpness: float


@dataclass(frozen=True)
class NormalQuality:
    edge_consistency: float
    orientation_variance: float
    sharpness: float


@dataclass(frozen=True)
class ScoreWeights:
    """Linear weights per metric.  Signs are part of the weight: the
    local-variance term enters the depth score as ``-0.2 * V``."""

    depth: dict = field(
        default_factory=lambda: {
            "edge_consistency": 0.3,
            "local_variance": -0.2,
            "complexity": 0.2,
            "sharpness": 0.3,
        }
    )
    normal: dict = field(
        default_factory=lambda: {
            "edge_consistency": 0.4,
            "orientation_variance": 0.4,
            "sharpness": 0.2,
        }
    )

    def __post_init__(self):
        for name, table, cls in (("depth", self.depth, DepthQuality), ("normal", self.normal, NormalQuality)):
            expected = {f.name for f in fields(cls)}
            if set(table) != expected:
                raise ParameterError(f"{name} weights must have keys {sorted(expected)}, got {sorted(table)}")
            for key, value in table.items():
                if not math.isfinite(float(value)):
                    raise ParameterError(f"{name}.{key} weight is not finite")

    @classmethod
    def from_overrides(cls, overrides: dict) -> "ScoreWeights":
        """Build weights from ``{"depth.sharpness": 0.5, ...}`` style keys."""
        base = cls()
        depth, normal = dict(base.depth), dict(base.normal)
        for key, value in overrides.items():
            group, _, metric = key.partition(".")
            table = {"depth": depth, "normal": normal}.get(group)
            if table is None or metric not in table:
                raise ParameterError(f"unknown weight key {key!r}")
            table[metric] = float(value)
        return cls(depth=depth, normal=normal)

    def to_dict(self) -> dict:
        return {"depth": dict(self.depth), "normal": dict(self.normal)}


def _rgb_edges(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    # normalising first makes luminance-as-depth hit the identical edge map
    _, _, mag = sobel_gradients(minmax_normalize(luminance(rgb)))
    return edge_mask(mag, EDGE_PERCENTILE)


def _edge_consistency(mask: np.ndarray, rgb_mask: np.ndarray) -> float:
    n_rgb = int(rgb_mask.sum())
    if n_rgb == 0:
        return 0.0
    return int(np.logical_and(mask, rgb_mask).sum()) / n_rgb


def _check_same_size(grid, rgb, what):
    if grid.shape[:2] != np.shape(rgb)[:2]:
        raise DimensionError(f"{what} is {grid.shape[:2]} but the RGB image is {np.shape(rgb)[:2]}")


def evaluate_depth_map(depth, rgb) -> DepthQuality:
    d = minmax_normalize(as_single_channel(depth))
    _check_same_size(d, rgb, "depth map")
    _, _, mag = sobel_gradients(d)
    return DepthQuality(
        edge_consistency=_edge_consistency(edge_mask(mag, EDGE_PERCENTILE), _rgb_edges(rgb)),
        local_variance=float(box_local_variance(d, VARIANCE_WINDOW).mean()),
        complexity=float(mag.mean()),
        sharpness=float(mag.max()),
    )


def normal_edge_magnitude(normals) -> np.ndarray:
    """Sum of the per-channel Sobel magnitudes of a normal field."""
    n = np.asarray(normals, dtype=np.float64)
    return sum(sobel_gradients(n[:, :, c])[2] for c in range(3))


def evaluate_normal_map(normals, rgb) -> NormalQuality:
    n = np.asarray(normals, dtype=np.float64)
    if n.ndim != 3 or n.shape[2] != 3:
        raise DimensionError(f"normal map must be (H, W, 3), got {n.shape}")
    _check_same_size(n, rgb, "normal map")
    n = normalize_vectors(n)
    mag = normal_edge_magnitude(n)
    mean_vec = n.reshape(-1, 3).mean(axis=0)
    vo = float(np.mean(1.0 - n.reshape(-1, 3) @ mean_vec))
    return NormalQuality(
        edge_consistency=_edge_consistency(edge_mask(mag, EDGE_PERCENTILE), _rgb_edges(rgb)),
        orientation_variance=min(max(vo, 0.0), 1.0),
        sharpness=float(mag.max()),
    )


def combined_score(dq: DepthQuality, nq: NormalQuality, weights: ScoreWeights | None = None):
    """Return ``(depth_score, normal_score, combined)``.

    Sums are exactly rounded (``math.fsum``) so results do not depend on
    metric iteration order.
    """
    w = weights or ScoreWeights()
    depth_score = math.fsum(getattr(dq, k) * float(v) for k, v in w.depth.items())
    normal_score = math.fsum(getattr(nq, k) * float(v) for k, v in w.normal.items())
    return depth_score, normal_score, depth_score + normal_score


def find_best_pair(candidates, weights: ScoreWeights | None = None) -> int:
    """Index of the highest combined score; ties go to the lowest index."""
    if not candidates:
        raise EmptyCandidatesError("no complete depth/normal candidates to choose from")
    scores = [combined_score(dq, nq, weights)[2] for dq, nq in candidates]
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


@dataclass
class CandidateResult:
    model: str
    depth_path: str
    normal_path: str
    depth_quality: DepthQuality
    normal_quality: NormalQuality
    depth_score: float
    normal_score: float
    combined_score: float

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "depth_path": self.depth_path,
            "normal_path": self.normal_path,
            "depth_quality": asdict(self.depth_quality),
            "normal_quality": asdict(self.normal_quality),
            "depth_score": self.depth_score,
            "normal_score": self.normal_score,
            "combined_score": self.combined_score,
        }


@dataclass
class ImageResult:
    rgb: str
    candidates: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    selected_index: int | None = None

    @property
    def skipped(self) -> bool:
        return self.selected_index is None

    @property
    def selected(self) -> CandidateResult | None:
        return None if self.skipped else self.candidates[self.selected_index]

    def to_dict(self) -> dict:
        return {
            "rgb": self.rgb,
            "candidates": [c.to_dict() for c in self.candidates],
            "excluded": [dict(e) for e in self.excluded],
            "selected_model": None if self.skipped else self.selected.model,
            "skipped": self.skipped,
        }


def score_candidate_set(cs: CandidateSet, weights: ScoreWeights) -> ImageResult:
    """Evaluate every complete candidate of one RGB image and select the best.

    Unreadable or mis-sized candidate files drop that candidate only.
    """
    result = ImageResult(rgb=str(cs.rgb_path), excluded=list(cs.incomplete))
    try:
        rgb = read_rgb(cs.rgb_path)
    except AquaCurateError as exc:
        logger.warning("skipping %s: %s", cs.rgb_path, exc)
        result.excluded.append({"model": None, "reason": f"rgb unreadable: {exc}"})
        return result
    for cand in cs.candidates:
        try:
            dq = evaluate_depth_map(read_depth(cand.depth_path), rgb)
            nq = evaluate_normal_map(read_normal_png(cand.normal_path), rgb)
        except (AquaCurateError, OSError) as exc:
            logger.warning("excluding %s for %s: %s", cand.model, cs.rgb_path, exc)
            result.excluded.append({"model": cand.model, "reason": str(exc)})
            continue
        ds, ns, cs_score = combined_score(dq, nq, weights)
        result.candidates.append(
            CandidateResult(cand.model, str(cand.depth_path), str(cand.normal_path), dq, nq, ds, ns, cs_score)
        )
    if result.candidates:
        result.selected_index = find_best_pair(
            [(c.depth_quality, c.normal_quality) for c in result.candidates], weights
        )
    return result


@dataclass
class CurationReport:
    images: list
    weights: ScoreWeights
    run_config: dict = field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "run_config": self.run_config,
            "weights": self.weights.to_dict(),
            "images": [im.to_dict() for im in self.images],
        }


def curate(rgb_dir, model_dirs, out_dir, weights: ScoreWeights | None = None, workers: int = 1,
           run_config: dict | None = None, report_path=None) -> CurationReport:
    """Select and copy the best depth/normal pair for every RGB image.

    Selected files are copied into ``out_dir`` as ``<model>_<filename>``
    and the full scoring table is written to ``report_path`` (default
    ``out_dir/dnesa_report.json``).
    """
    from .reports import write_report

    if workers < 1:
        raise ParameterError(f"workers must be >= 1, got {workers}")
    weights = weights or ScoreWeights()
    sets = discover_pairs(rgb_dir, model_dirs)
    if not sets:
        logger.warning("no RGB images found in %s", rgb_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        images = list(pool.map(lambda cs: score_candidate_set(cs, weights), sets))

    for im in images:
        if im.skipped:
            logger.warning("no complete candidates for %s", im.rgb)
            continue
        best = im.selected
        for src in (best.depth_path, best.normal_path):
            shutil.copyfile(src, out_dir / f"{best.model}_{Path(src).name}")

    report = CurationReport(images=images, weights=weights, run_config=dict(run_config or {}))
    write_report(report.to_dict(), Path(report_path) if report_path else out_dir / REPORT_NAME, "json")
    return report
