"""
Post-inference pipeline: probability map -> refined mask -> GTR/RT verdict

Stages, in order: binarize, connected components, small-component removal,
residual volume, resection classification. Ensembling and extent of
resection live here too since they operate on the same objects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .grid import PROBABILITY, BinaryMask, GridGeometry, VoxelGrid, require_same_geometry, volume_ml

logger = logging.getLogger(__name__)

GTR = 'GTR'
RT = 'RT'

DEFAULT_THRESHOLD = 0.5
DEFAULT_CONNECTIVITY = 26
DEFAULT_MIN_VOXELS = 20
DEFAULT_CUTOFF_ML = 0.175

# scipy structuring-element rank for each neighbourhood size
_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class Component:
    label: int
    voxel_count: int
    volume_ml: float
    bbox: Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Labels 1..K ordered by each component's smallest x-fastest linear index"""

    geometry: GridGeometry
    labels: np.ndarray
    components: Tuple[Component, ...]
    connectivity: int

    @property
    def count(self) -> int:
        return len(self.components)

    def voxel_counts(self) -> List[int]:
        return [c.voxel_count for c in self.components]


@dataclass(frozen=True)
class ResectionVerdict:
    residual_volume_ml: float
    classification: str
    cutoff_ml: float = DEFAULT_CUTOFF_ML

    @property
    def is_gtr(self) -> bool:
        return self.classification == GTR

    def to_dict(self) -> Dict[str, object]:
        return {
            'volume_ml': self.residual_volume_ml,
            'classification': self.classification,
            'cutoff_ml': self.cutoff_ml,
        }


@dataclass(frozen=True)
class ExtentOfResection:
    eor: float
    preop_volume_ml: float
    residual_volume_ml: float
    clamped: bool


class PostprocessResult(NamedTuple):
    mask: BinaryMask
    verdict: ResectionVerdict


def _check_threshold(threshold: float) -> float:
    threshold = float(threshold)
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgumentError(f"Threshold must be in [0, 1], got {threshold}")
    return threshold


def _check_connectivity(connectivity: int) -> int:
    if connectivity not in _CONNECTIVITY_RANK:
        raise InvalidArgumentError(
            f"Connectivity must be one of {sorted(_CONNECTIVITY_RANK)}, got {connectivity}"
        )
    return int(connectivity)


def binarize(prob: VoxelGrid, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """Foreground where prob >= threshold (inclusive, so 1.0 is attainable)"""
    threshold = _check_threshold(threshold)
    if prob.kind != PROBABILITY:
        raise InvalidArgumentError(f"Expected a probability grid, got kind '{prob.kind}'")
    return BinaryMask(prob.geometry, prob.data >= threshold)


def connected_components(mask: BinaryMask, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentLabeling:
    """
    Label the foreground into connected components

    Args:
        mask: Binary mask to label
        connectivity: 6 (faces), 18 (faces + edges) or 26 (faces + edges + corners)

    Returns:
        ComponentLabeling with consecutive labels sorted by each component's
        minimum linear voxel index (x fastest)
    """
    connectivity = _check_connectivity(connectivity)
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    raw, k = ndimage.label(mask.data, structure=structure)
    if k == 0:
        return ComponentLabeling(mask.geometry, np.zeros(mask.geometry.shape, np.int32), (), connectivity)

    linear = np.arange(raw.size, dtype=np.int64).reshape(raw.shape, order='F')
    first_index = ndimage.minimum(linear, labels=raw, index=np.arange(1, k + 1))
    order = np.argsort(np.asarray(first_index), kind='stable')
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    labels = remap[raw]

    counts = np.bincount(labels.ravel(), minlength=k + 1)
    components = []
    for label, box in enumerate(ndimage.find_objects(labels), start=1):
        count = int(counts[label])
        components.append(
            Component(
                label=label,
                voxel_count=count,
                volume_ml=volume_ml(mask.geometry, count),
                bbox=tuple((int(s.start), int(s.stop)) for s in box),
            )
        )
    labels.flags.writeable = False
    return ComponentLabeling(mask.geometry, labels, tuple(components), connectivity)


def filter_small_components(labeling: ComponentLabeling, min_voxels: int = DEFAULT_MIN_VOXELS) -> BinaryMask:
    """Keep only the components with at least ``min_voxels`` voxels"""
    if int(min_voxels) < 1:
        raise InvalidArgumentError(f"min_voxels must be >= 1, got {min_voxels}")
    keep = np.zeros(labeling.count + 1, dtype=np.uint8)
    for component in labeling.components:
        if component.voxel_count >= min_voxels:
            keep[component.label] = 1
    removed = labeling.count - int(keep.sum())
    if removed:
        logger.debug(f"Removed {removed} of {labeling.count} components below {min_voxels} voxels")
    return BinaryMask(labeling.geometry, keep[labeling.labels])


def residual_volume_ml(mask: BinaryMask) -> float:
    return mask.volume_ml()


def classify_resection(volume_ml: float, cutoff_ml: float = DEFAULT_CUTOFF_ML) -> ResectionVerdict:
    """GTR when the residual volume is strictly below the cutoff, RT otherwise"""
    if volume_ml < 0:
        raise InvalidArgumentError(f"Residual volume must be >= 0, got {volume_ml}")
    if cutoff_ml <= 0:
        raise InvalidArgumentError(f"Cutoff must be > 0, got {cutoff_ml}")
    classification = GTR if volume_ml < cutoff_ml else RT
    return ResectionVerdict(float(volume_ml), classification, float(cutoff_ml))


def ensemble_average(probs: Sequence[VoxelGrid]) -> VoxelGrid:
    """
    Pointwise mean of several probability maps

    Values are sorted per voxel before summation so the result does not
    depend on the order of the inputs.
    """
    if not probs:
        raise InvalidArgumentError("At least one probability map is required")
    for prob in probs:
        if prob.kind != PROBABILITY:
            raise InvalidArgumentError(f"Expected probability grids, got kind '{prob.kind}'")
    geometry = require_same_geometry(*probs)
    if len(probs) == 1:
        return VoxelGrid(geometry, np.array(probs[0].data), PROBABILITY)

    stacked = np.sort(np.stack([np.asarray(p.data, dtype=np.float64) for p in probs]), axis=0)
    mean = stacked.sum(axis=0) / len(probs)
    mean = np.clip(mean, stacked[0], stacked[-1])
    return VoxelGrid(geometry, mean, PROBABILITY)


def compute_eor(preop_volume_ml: float, residual_volume_ml: float) -> ExtentOfResection:
    """Extent of resection (preop - residual) / preop, clamped to [0, 1]"""
    if preop_volume_ml <= 0:
        raise InvalidArgumentError(f"Pre-operative volume must be > 0, got {preop_volume_ml}")
    if residual_volume_ml < 0:
        raise InvalidArgumentError(f"Residual volume must be >= 0, got {residual_volume_ml}")
    raw = (preop_volume_ml - residual_volume_ml) / preop_volume_ml
    eor = min(1.0, max(0.0, raw))
    clamped = eor != raw
    if clamped:
        logger.warning(
            f"EOR {raw:.4f} clamped to {eor:.1f} (preop {preop_volume_ml} ml, residual {residual_volume_ml} ml)"
        )
    return ExtentOfResection(eor, float(preop_volume_ml), float(residual_volume_ml), clamped)


def run_postprocess(
    prob: VoxelGrid,
    threshold: float = DEFAULT_THRESHOLD,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_voxels: int = DEFAULT_MIN_VOXELS,
    cutoff_ml: float = DEFAULT_CUTOFF_ML,
) -> PostprocessResult:
    """binarize -> connected_components -> filter_small_components -> volume -> verdict"""
    mask = binarize(prob, threshold)
    labeling = connected_components(mask, connectivity)
    refined = filter_small_components(labeling, min_voxels)
    verdict = classify_resection(residual_volume_ml(refined), cutoff_ml)
    return PostprocessResult(refined, verdict)


def threshold_sweep(
    prob: VoxelGrid,
    gt: Optional[BinaryMask] = None,
    steps: int = 11,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_voxels: int = DEFAULT_MIN_VOXELS,
    cutoff_ml: float = DEFAULT_CUTOFF_ML,
) -> List[Dict[str, object]]:
    """
    Run the pipeline at evenly spaced thresholds over [0, 1]

    Returns one row per threshold with the predicted volume, verdict and,
    when a ground truth is given, the Dice score against it.
    """
    from .metrics import dice  # metrics imports this module

    if steps < 2:
        raise InvalidArgumentError(f"Sweep needs at least 2 steps, got {steps}")
    rows = []
    for threshold in np.linspace(0.0, 1.0, steps):
        result = run_postprocess(prob, float(threshold), connectivity, min_voxels, cutoff_ml)
        row: Dict[str, object] = {
            'threshold': round(float(threshold), 6),
            'pred_volume_ml': result.verdict.residual_volume_ml,
            'classification': result.verdict.classification,
        }
        if gt is not None:
            row['dice'] = dice(gt, result.mask)
        rows.append(row)
    return rows
