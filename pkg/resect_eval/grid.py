"""
Voxel grids, binary masks and the preprocessing applied around inference

Arrays are indexed ``[x, y, z]`` with x the fastest-varying axis on disk,
the same layout NIfTI uses. A grid's affine maps voxel indices to the
physical centre of that voxel in millimetres.

All operations here are pure: they never modify their inputs and always
return new grids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import IncompatibleGridsError, InvalidArgumentError, InvalidGeometryError

logger = logging.getLogger(__name__)

RAW = 'raw'
NORMALIZED = 'normalized'
PROBABILITY = 'probability'
INTENSITY_KINDS = (RAW, NORMALIZED, PROBABILITY)

TRILINEAR = 'trilinear'
NEAREST = 'nearest'
_SPLINE_ORDER = {TRILINEAR: 1, NEAREST: 0}

# Sequence roles an input configuration can draw from
EPMR_T1WCE = 'EPMR-T1wCE'
EPMR_T1W = 'EPMR-T1w'
EPMR_FLAIR = 'EPMR-FLAIR'
PRE_T1WCE = 'PRE-T1wCE'
PRE_LABEL = 'PRE-label'
SEQUENCE_ROLES = (EPMR_T1WCE, EPMR_T1W, EPMR_FLAIR, PRE_T1WCE, PRE_LABEL)


def _as_triple(values: Sequence[float], name: str, cast: Callable[[Any], Any] = float) -> Tuple[Any, ...]:
    items = tuple(cast(v) for v in values)
    if len(items) != 3:
        raise InvalidArgumentError(f"{name} must have exactly 3 entries, got {len(items)}")
    return items


@dataclass(frozen=True, eq=False)
class GridGeometry:
    """Shape, spacing and voxel-to-world affine of a 3D grid"""

    shape: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self) -> None:
        shape = _as_triple(self.shape, 'shape', int)
        spacing = _as_triple(self.spacing, 'spacing', float)
        if any(s < 1 for s in shape):
            raise InvalidGeometryError(f"Shape entries must be >= 1, got {shape}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise InvalidGeometryError(f"Spacing entries must be > 0, got {spacing}")

        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise InvalidGeometryError("Affine must be a finite 4x4 matrix")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise InvalidGeometryError("Affine is singular")
        norms = np.linalg.norm(affine[:3, :3], axis=0)
        if not np.allclose(norms, spacing, rtol=1e-6, atol=0.0):
            raise InvalidGeometryError(
                f"Affine column norms {tuple(norms)} do not match spacing {spacing}"
            )
        affine.flags.writeable = False

        object.__setattr__(self, 'shape', shape)
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'affine', affine)

    @classmethod
    def from_affine(cls, shape: Sequence[int], affine: np.ndarray) -> 'GridGeometry':
        """Build a geometry whose spacing is read off the affine columns"""
        affine = np.asarray(affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise InvalidGeometryError("Affine must be a 4x4 matrix")
        spacing = tuple(float(n) for n in np.linalg.norm(affine[:3, :3], axis=0))
        return cls(tuple(shape), spacing, affine)

    @classmethod
    def from_spacing(
        cls,
        shape: Sequence[int],
        spacing: Sequence[float] = (1.0, 1.0, 1.0),
        origin: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> 'GridGeometry':
        """Axis-aligned geometry with the given spacing and voxel-0 centre"""
        spacing = _as_triple(spacing, 'spacing', float)
        affine = np.diag(list(spacing) + [1.0])
        affine[:3, 3] = _as_triple(origin, 'origin', float)
        return cls(tuple(shape), spacing, affine)

    @property
    def origin(self) -> Tuple[float, float, float]:
        return tuple(float(v) for v in self.affine[:3, 3])

    @property
    def extent_mm(self) -> Tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.shape, self.spacing))

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.shape))

    def with_spacing(
        self, spacing: Sequence[float], shape: Optional[Sequence[int]] = None
    ) -> 'GridGeometry':
        """Same orientation and origin, new spacing (and optionally shape)"""
        spacing = _as_triple(spacing, 'spacing', float)
        scale = np.asarray(spacing) / np.asarray(self.spacing)
        affine = np.array(self.affine)
        affine[:3, :3] = affine[:3, :3] * scale[None, :]
        return GridGeometry(tuple(shape) if shape is not None else self.shape, spacing, affine)

    def matches(self, other: 'GridGeometry', atol: float = 1e-5) -> bool:
        return self.shape == other.shape and np.allclose(
            self.affine, other.affine, rtol=0.0, atol=atol
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridGeometry):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and np.array_equal(self.affine, other.affine)
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.spacing, self.affine.tobytes()))

    def __repr__(self) -> str:
        return f"GridGeometry(shape={self.shape}, spacing={self.spacing}, origin={self.origin})"


def _readonly(array: np.ndarray) -> np.ndarray:
    view = array.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense scalar volume with geometry and an intensity kind tag"""

    geometry: GridGeometry
    data: np.ndarray
    kind: str = RAW

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.shape != self.geometry.shape:
            raise InvalidArgumentError(
                f"Data shape {data.shape} does not match geometry shape {self.geometry.shape}"
            )
        if self.kind not in INTENSITY_KINDS:
            raise InvalidArgumentError(f"Unknown intensity kind '{self.kind}'")
        if self.kind == PROBABILITY and data.size:
            if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
                raise InvalidArgumentError("Probability grids must hold values in [0, 1]")
        object.__setattr__(self, 'data', _readonly(data))

    def with_data(self, data: np.ndarray, kind: Optional[str] = None) -> 'VoxelGrid':
        return VoxelGrid(self.geometry, data, self.kind if kind is None else kind)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Dense {0, 1} volume (annotations, predictions, brain masks)"""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.data)
        if values.shape != self.geometry.shape:
            raise InvalidArgumentError(
                f"Mask shape {values.shape} does not match geometry shape {self.geometry.shape}"
            )
        if values.dtype != np.bool_:
            if values.size and not np.isin(values, (0, 1)).all():
                raise InvalidArgumentError("Mask values must be exactly 0 or 1")
        object.__setattr__(self, 'data', _readonly(values.astype(np.uint8)))

    @classmethod
    def empty(cls, geometry: GridGeometry) -> 'BinaryMask':
        return cls(geometry, np.zeros(geometry.shape, dtype=np.uint8))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def volume_ml(self) -> float:
        return volume_ml(self.geometry, self.count)


Volume = Union[VoxelGrid, BinaryMask]


def require_same_geometry(*volumes: Volume) -> GridGeometry:
    """Return the shared geometry or raise IncompatibleGridsError"""
    reference = volumes[0].geometry
    for other in volumes[1:]:
        if not reference.matches(other.geometry):
            raise IncompatibleGridsError(
                f"Grid geometries differ: {reference!r} vs {other.geometry!r}"
            )
    return reference


@dataclass(frozen=True)
class InputConfiguration:
    """Ordered set of sequences fed to a segmentation model"""

    label: str
    sequences: Tuple[str, ...]

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)


def _build_input_configurations() -> Dict[str, InputConfiguration]:
    a = (EPMR_T1WCE,)
    b = a + (EPMR_T1W,)
    c = b + (EPMR_FLAIR,)
    d = b + (PRE_T1WCE, PRE_LABEL)
    e = c + (PRE_T1WCE, PRE_LABEL)
    return {label: InputConfiguration(label, seqs) for label, seqs in zip('ABCDE', (a, b, c, d, e))}


INPUT_CONFIGURATIONS = _build_input_configurations()


def input_configuration(label: str) -> InputConfiguration:
    try:
        return INPUT_CONFIGURATIONS[label.upper()]
    except (KeyError, AttributeError):
        raise InvalidArgumentError(
            f"Unknown input configuration '{label}'. Must be one of: {sorted(INPUT_CONFIGURATIONS)}"
        ) from None


def volume_ml(geometry: GridGeometry, voxel_count: int) -> float:
    """Physical volume in ml of ``voxel_count`` voxels of this geometry"""
    sx, sy, sz = geometry.spacing
    return float(voxel_count) * sx * sy * sz / 1000.0


def voxel_volume_ml(geometry: GridGeometry) -> float:
    """Volume of a single voxel in ml (1 ml = 1000 mm^3)"""
    return volume_ml(geometry, 1)


def _check_mode(mode: str, volume: Volume) -> int:
    if mode not in _SPLINE_ORDER:
        raise InvalidArgumentError(f"Unknown interpolation mode '{mode}'")
    if isinstance(volume, BinaryMask) and mode != NEAREST:
        raise InvalidArgumentError("Binary masks can only be resampled in nearest mode")
    return _SPLINE_ORDER[mode]


def _default_mode(volume: Volume, mode: Optional[str]) -> str:
    if mode is not None:
        return mode
    return NEAREST if isinstance(volume, BinaryMask) else TRILINEAR


def _sample(volume: Volume, target: GridGeometry, mode: str) -> np.ndarray:
    """Sample ``volume`` at the voxel centres of ``target``; 0 outside its extent"""
    order = _check_mode(mode, volume)
    source = volume.geometry
    try:
        index_map = np.linalg.inv(source.affine) @ target.affine
    except np.linalg.LinAlgError as e:
        raise InvalidGeometryError(f"Affine is not invertible: {e}") from None

    points = np.indices(target.shape, dtype=np.float64).reshape(3, -1)
    coords = index_map[:3, :3] @ points + index_map[:3, 3:4]

    upper = np.asarray(source.shape, dtype=np.float64)[:, None] - 0.5
    inside = np.all((coords >= -0.5 - 1e-9) & (coords <= upper + 1e-9), axis=0)

    data = volume.data if order == 0 else volume.data.astype(np.float64)
    values = ndimage.map_coordinates(data, coords, order=order, mode='nearest')
    values[~inside] = 0
    return values.reshape(target.shape)


def _rebuild(volume: Volume, geometry: GridGeometry, data: np.ndarray) -> Volume:
    if isinstance(volume, BinaryMask):
        return BinaryMask(geometry, data)
    if volume.kind == PROBABILITY:
        data = np.clip(data, 0.0, 1.0)
    return VoxelGrid(geometry, data, volume.kind)


def resample(volume: Volume, target_spacing: Sequence[float], mode: Optional[str] = None) -> Volume:
    """
    Resample to a new voxel spacing, keeping orientation and origin

    Args:
        volume: Grid or mask to resample
        target_spacing: Output spacing in mm along (x, y, z)
        mode: 'trilinear' or 'nearest'. Defaults to nearest for masks.

    Returns:
        New grid of shape round(shape * spacing / target_spacing), at least 1 per axis
    """
    mode = _default_mode(volume, mode)
    _check_mode(mode, volume)
    target_spacing = _as_triple(target_spacing, 'target_spacing', float)
    if any(not np.isfinite(s) or s <= 0 for s in target_spacing):
        raise InvalidArgumentError(f"Target spacing entries must be > 0, got {target_spacing}")

    geometry = volume.geometry
    if target_spacing == geometry.spacing:
        return _rebuild(volume, geometry, np.array(volume.data))

    shape = tuple(
        max(1, int(np.floor(n * s / t + 0.5)))
        for n, s, t in zip(geometry.shape, geometry.spacing, target_spacing)
    )
    target = geometry.with_spacing(target_spacing, shape)
    logger.debug(f"Resampling {geometry.shape}@{geometry.spacing} -> {shape}@{target_spacing} ({mode})")
    return _rebuild(volume, target, _sample(volume, target, mode))


def resize_to(volume: Volume, target_shape: Sequence[int], mode: Optional[str] = None) -> Volume:
    """Resize to an exact shape; spacing is rescaled so the physical extent is preserved"""
    mode = _default_mode(volume, mode)
    _check_mode(mode, volume)
    target_shape = _as_triple(target_shape, 'target_shape', int)
    if any(n < 1 for n in target_shape):
        raise InvalidArgumentError(f"Target shape entries must be >= 1, got {target_shape}")

    geometry = volume.geometry
    if target_shape == geometry.shape:
        return _rebuild(volume, geometry, np.array(volume.data))

    spacing = tuple(n * s / t for n, s, t in zip(geometry.shape, geometry.spacing, target_shape))
    target = geometry.with_spacing(spacing, target_shape)
    return _rebuild(volume, target, _sample(volume, target, mode))


def resample_to_reference(
    moving: Volume, reference: GridGeometry, mode: Optional[str] = None
) -> Volume:
    """
    Bring ``moving`` onto the grid of ``reference`` through both affines

    Only rigid/affine grid alignment is done here; the inputs are expected
    to be co-registered already.
    """
    mode = _default_mode(moving, mode)
    _check_mode(mode, moving)
    if moving.geometry == reference:
        return _rebuild(moving, reference, np.array(moving.data))
    return _rebuild(moving, reference, _sample(moving, reference, mode))


@dataclass(frozen=True)
class Normalization:
    grid: VoxelGrid
    mean: float
    std: float
    degenerate: bool


def zero_mean_normalize(
    grid: VoxelGrid, region: Union[BinaryMask, str] = 'nonzero'
) -> Normalization:
    """
    Zero-mean, unit (population) std normalization over a region

    Args:
        grid: Intensity grid
        region: A brain mask, 'nonzero' (voxels != 0) or 'whole'

    Returns:
        Normalization with the output grid (0 outside the region), the
        statistics used, and a degenerate flag set when the region is constant
    """
    if isinstance(region, BinaryMask):
        require_same_geometry(grid, region)
        selected = region.as_bool()
    elif region == 'nonzero':
        selected = grid.data != 0
    elif region == 'whole':
        selected = np.ones(grid.geometry.shape, dtype=bool)
    else:
        raise InvalidArgumentError(f"Unknown normalization region '{region}'")

    if not selected.any():
        raise InvalidArgumentError("Normalization region is empty")

    values = grid.data[selected].astype(np.float64)
    mean = float(values.mean())
    std = float(values.std())
    out = np.zeros(grid.geometry.shape, dtype=np.float64)
    degenerate = std == 0.0
    if degenerate:
        logger.warning("Normalization region is constant; output set to zero")
    else:
        out[selected] = (values - mean) / std
    return Normalization(VoxelGrid(grid.geometry, out, NORMALIZED), mean, std, degenerate)


def apply_mask(grid: VoxelGrid, brain: BinaryMask) -> VoxelGrid:
    """Skull-strip: keep values inside the brain mask, zero elsewhere"""
    require_same_geometry(grid, brain)
    data = np.where(brain.as_bool(), grid.data, np.zeros((), dtype=grid.data.dtype))
    return VoxelGrid(grid.geometry, data, grid.kind)


@dataclass(frozen=True)
class PreprocessingPreset:
    name: str
    spacing: Tuple[float, float, float]
    shape: Optional[Tuple[int, int, int]] = None


PREPROCESSING_PRESETS = {
    'nnunet': PreprocessingPreset('nnunet', (0.5, 0.5, 1.0)),
    'agunet': PreprocessingPreset('agunet', (1.0, 1.0, 1.0), (128, 128, 144)),
}


def preprocess(
    grid: VoxelGrid, brain: BinaryMask, preset: str = 'nnunet'
) -> Tuple[VoxelGrid, BinaryMask]:
    """
    Resample, skull-strip and normalize one scan the way a model preset expects

    The brain mask follows the image through nearest-neighbour resampling and
    is returned on the output grid.
    """
    if preset not in PREPROCESSING_PRESETS:
        raise InvalidArgumentError(
            f"Unknown preset '{preset}'. Must be one of: {sorted(PREPROCESSING_PRESETS)}"
        )
    require_same_geometry(grid, brain)
    preset_cfg = PREPROCESSING_PRESETS[preset]

    image = resample(grid, preset_cfg.spacing, TRILINEAR)
    mask = resample(brain, preset_cfg.spacing, NEAREST)
    if preset_cfg.shape is not None:
        image = resize_to(image, preset_cfg.shape, TRILINEAR)
        mask = resize_to(mask, preset_cfg.shape, NEAREST)

    stripped = apply_mask(image, mask)
    if mask.count == 0:
        logger.warning("Brain mask is empty after resampling; skipping normalization")
        return stripped, mask
    return zero_mean_normalize(stripped, mask).grid, mask
