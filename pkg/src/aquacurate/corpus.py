"""Corpus discovery: pair each RGB image with every model's depth and normal files.

For ``reef01.png`` a model folder is expected to hold ``reef01_depth.pfm``
(or ``reef01_depth.png``) and ``reef01_normal.png``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AquaCurateError
from .io import DEPTH_EXTENSIONS, RGB_EXTENSIONS

logger = logging.getLogger(__name__)


class CorpusError(AquaCurateError, OSError):
    pass


@dataclass(frozen=True)
class Candidate:
    model: str
    depth_path: Path
    normal_path: Path


@dataclass
class CandidateSet:
    rgb_path: Path
    candidates: list = field(default_factory=list)
    incomplete: list = field(default_factory=list)


def _listing(directory: Path) -> dict:
    try:
        return {p.name: p for p in directory.iterdir() if p.is_file()}
    except OSError as exc:
        raise CorpusError(f"cannot read directory {directory}: {exc}") from exc


def find_depth_file(stem: str, files: dict, model: str = "") -> Path | None:
    """PFM wins over PNG when both exist."""
    found = [files[f"{stem}_depth{ext}"] for ext in DEPTH_EXTENSIONS if f"{stem}_depth{ext}" in files]
    if len(found) > 1:
        logger.warning("%s: several depth files for %s, using %s", model, stem, found[0].name)
    return found[0] if found else None


def find_normal_file(stem: str, files: dict) -> Path | None:
    return files.get(f"{stem}_normal.png")


def discover_pairs(rgb_dir, model_dirs) -> list:
    """Build one :class:`CandidateSet` per RGB image, sorted by filename.

    Models keep the order they were given in; a model lacking either file
    for an image is recorded in ``incomplete`` and not scored.
    """
    rgb_dir = Path(rgb_dir)
    if not rgb_dir.is_dir():
        raise CorpusError(f"RGB directory {rgb_dir} does not exist")
    model_dirs = [Path(m) for m in model_dirs]
    names = [m.name for m in model_dirs]
    if len(set(names)) != len(names):
        raise CorpusError(f"model directory names must be unique, got {names}")
    listings = [_listing(m) for m in model_dirs]

    sets = []
    for name in sorted(_listing(rgb_dir)):
        path = rgb_dir / name
        if path.suffix.lower() not in RGB_EXTENSIONS:
            continue
        cs = CandidateSet(rgb_path=path)
        for model_dir, files in zip(model_dirs, listings):
            depth = find_depth_file(path.stem, files, model_dir.name)
            normal = find_normal_file(path.stem, files)
            if depth is None or normal is None:
                missing = "depth" if depth is None else "normal"
                if depth is None and normal is None:
                    missing = "depth and normal"
                cs.incomplete.append({"model": model_dir.name, "reason": f"missing {missing} file"})
                continue
            cs.candidates.append(Candidate(model_dir.name, depth, normal))
        sets.append(cs)
    return sets
