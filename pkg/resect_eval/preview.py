"""
QC previews: one 2D slice of a scan with mask contours drawn on top
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .errors import InvalidArgumentError, VolumeIOError
from .grid import PROBABILITY, BinaryMask, VoxelGrid, require_same_geometry

logger = logging.getLogger(__name__)

# BGR
GT_COLOR = (255, 0, 0)
PRED_COLOR = (0, 0, 255)

COLORMAPS = {
    'gray': None,
    'jet': cv2.COLORMAP_JET,
    'inferno': cv2.COLORMAP_INFERNO,
}


def _take_slice(data: np.ndarray, axis: int, index: int) -> np.ndarray:
    # rows follow the second remaining axis so x runs left to right
    return np.ascontiguousarray(np.take(data, index, axis=axis).T)


def select_slice(masks: Sequence[Optional[BinaryMask]], axis: int, size: int) -> int:
    """Slice holding the most foreground over all masks, or the middle slice"""
    total = np.zeros(size, dtype=np.int64)
    for mask in masks:
        if mask is None:
            continue
        other = tuple(a for a in range(3) if a != axis)
        total += mask.data.sum(axis=other, dtype=np.int64)
    if not total.any():
        return size // 2
    return int(np.argmax(total))


def _draw_contours(canvas: np.ndarray, mask_slice: np.ndarray, color: Tuple[int, int, int]) -> None:
    contours = cv2.findContours(
        np.ascontiguousarray(mask_slice, dtype=np.uint8), cv2.RETR_LIST, cv2.CHAIN_APPROX_NONE
    )[-2]
    cv2.drawContours(canvas, contours, -1, color, 1)


def render_overlay(
    image: VoxelGrid,
    gt: Optional[BinaryMask] = None,
    pred: Optional[BinaryMask] = None,
    axis: int = 2,
    index: Optional[int] = None,
    colormap: Optional[str] = None,
) -> np.ndarray:
    """
    Render a slice of ``image`` with the GT contour in blue and the prediction in red

    Args:
        image: Scan or probability map
        gt: Ground-truth mask on the same grid
        pred: Predicted mask on the same grid
        axis: Slicing axis (0=x, 1=y, 2=z)
        index: Slice index; defaults to the slice with the most mask voxels
        colormap: 'gray', 'jet' or 'inferno'; probability maps default to jet

    Returns:
        BGR uint8 image
    """
    if axis not in (0, 1, 2):
        raise InvalidArgumentError(f"axis must be 0, 1 or 2, got {axis}")
    require_same_geometry(image, *[m for m in (gt, pred) if m is not None])
    size = image.geometry.shape[axis]
    if index is None:
        index = select_slice([gt, pred], axis, size)
    if not 0 <= index < size:
        raise InvalidArgumentError(f"Slice index {index} outside [0, {size})")
    colormap = colormap or ('jet' if image.kind == PROBABILITY else 'gray')
    if colormap not in COLORMAPS:
        raise InvalidArgumentError(f"Unknown colormap '{colormap}'. Must be one of: {list(COLORMAPS)}")

    plane = _take_slice(np.asarray(image.data, dtype=np.float32), axis, index)
    gray = cv2.normalize(plane, None, 0, 255, cv2.NORM_MINMAX, dtype=cv2.CV_8U)
    if COLORMAPS[colormap] is None:
        canvas = cv2.cvtColor(gray, cv2.COLOR_GRAY2BGR)
    else:
        canvas = cv2.applyColorMap(gray, COLORMAPS[colormap])

    if gt is not None:
        _draw_contours(canvas, _take_slice(gt.data, axis, index), GT_COLOR)
    if pred is not None:
        _draw_contours(canvas, _take_slice(pred.data, axis, index), PRED_COLOR)
    return canvas


def write_preview(canvas: np.ndarray, path: Union[str, Path]) -> Path:
    """Encode a rendered preview as PNG"""
    path = Path(path)
    ok, encoded = cv2.imencode('.png', canvas)
    if not ok:
        raise VolumeIOError(f"PNG encoding failed for {path}")
    try:
        path.write_bytes(encoded.tobytes())
    except OSError as e:
        raise VolumeIOError(f"Failed to write {path}: {e}") from None
    logger.debug(f"Wrote preview {path}")
    return path
