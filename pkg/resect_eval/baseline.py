"""
Threshold-based reference segmenter

Contrast-enhancing voxels are found with an Otsu split of the T1w-CE
intensities inside the brain. Candidates that are also bright on T1w are
treated as blood and dropped. The output is a hard 0/1 map in a
probability container so it feeds the post-processing pipeline unchanged.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import DegenerateHistogramError, InvalidArgumentError
from .grid import PROBABILITY, BinaryMask, VoxelGrid, require_same_geometry

logger = logging.getLogger(__name__)

N_BINS = 256


@dataclass(frozen=True, eq=False)
class IntensityHistogram:
    """256-bin histogram spanning [vmin, vmax] of a region"""

    counts: np.ndarray
    vmin: float
    vmax: float

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (N_BINS,) or (counts < 0).any():
            raise InvalidArgumentError(f"Histogram needs {N_BINS} non-negative counts")
        object.__setattr__(self, 'counts', counts)

    @classmethod
    def from_values(cls, values: np.ndarray) -> 'IntensityHistogram':
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return cls(np.zeros(N_BINS, dtype=np.int64), 0.0, 0.0)
        vmin, vmax = float(values.min()), float(values.max())
        hist = cls(np.zeros(N_BINS, dtype=np.int64), vmin, vmax)
        counts = np.bincount(hist.bin_indices(values), minlength=N_BINS)
        return cls(counts, vmin, vmax)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def bin_indices(self, values: np.ndarray) -> np.ndarray:
        """floor(255 * (v - min) / (max - min)), clamped to [0, 255]"""
        values = np.asarray(values, dtype=np.float64)
        span = self.vmax - self.vmin
        if span <= 0:
            return np.zeros(values.shape, dtype=np.int64)
        index = np.floor((N_BINS - 1) * (values - self.vmin) / span)
        return np.clip(index, 0, N_BINS - 1).astype(np.int64)


def otsu_threshold(hist: IntensityHistogram) -> int:
    """
    Bin index t maximizing the between-class variance

    Class 0 holds bins < t, class 1 bins >= t. The variance is compared in
    exact rational arithmetic, so ties are real ties and the smallest
    maximizer wins.

    Raises:
        DegenerateHistogramError: fewer than two non-empty bins
    """
    counts = [int(c) for c in hist.counts]
    if sum(1 for c in counts if c) < 2:
        raise DegenerateHistogramError('Histogram has fewer than two non-empty bins')

    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t, best_score = 0, Fraction(-1)
    n0 = s0 = 0
    for t in range(N_BINS):
        if t:
            n0 += counts[t - 1]
            s0 += (t - 1) * counts[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            # w0*w1*(mu0 - mu1)^2 up to the constant factor 1/N^2
            score = Fraction((s0 * n1 - (total_sum - s0) * n0) ** 2, n0 * n1)
        if score > best_score:
            best_t, best_score = t, score
    return best_t


def _otsu_split(grid: VoxelGrid, region: np.ndarray, name: str) -> Optional[np.ndarray]:
    """Voxels of ``region`` in the upper Otsu class, or None if degenerate"""
    values = grid.data[region]
    hist = IntensityHistogram.from_values(values)
    try:
        t = otsu_threshold(hist)
    except DegenerateHistogramError:
        logger.warning(f"{name} histogram inside the brain is degenerate")
        return None
    upper = np.zeros(grid.geometry.shape, dtype=bool)
    upper[region] = hist.bin_indices(values) >= t
    logger.debug(f"{name}: Otsu bin {t} over [{hist.vmin:.2f}, {hist.vmax:.2f}]")
    return upper


def baseline_segment(
    t1ce: VoxelGrid, t1w: Optional[VoxelGrid], brain: BinaryMask
) -> VoxelGrid:
    """
    Segment residual tumor without a trained model

    Args:
        t1ce: Post-operative T1w-CE scan
        t1w: Post-operative T1w scan, co-registered. When None (input
            configuration A) no blood exclusion is done.
        brain: Brain mask on the same grid

    Returns:
        Probability grid holding 1.0 on the segmented voxels and 0.0 elsewhere
    """
    volumes = [t1ce, brain] if t1w is None else [t1ce, t1w, brain]
    geometry = require_same_geometry(*volumes)
    region = brain.as_bool()
    output = np.zeros(geometry.shape, dtype=np.float32)

    candidate = _otsu_split(t1ce, region, 'T1w-CE')
    if candidate is None:
        return VoxelGrid(geometry, output, PROBABILITY)
    if t1w is not None:
        blood = _otsu_split(t1w, region, 'T1w')
        if blood is not None:
            candidate &= ~blood
    output[candidate] = 1.0
    return VoxelGrid(geometry, output, PROBABILITY)
