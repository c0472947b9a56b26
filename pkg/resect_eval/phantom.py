"""
Synthetic post-operative cohorts

Each phantom is an ellipsoidal brain with a resection cavity. Residual
tumor fragments sit on the cavity rim and are bright on T1w-CE only; blood
mimics are bright on both T1w-CE and T1w. The ground truth is exactly the
tumor fragments, so an intensity-threshold segmenter that removes
T1w-bright voxels recovers it.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .cohort import CohortManifest, PatientRecord, load_manifest, write_manifest
from .errors import InvalidArgumentError, VolumeIOError
from .grid import PROBABILITY, BinaryMask, GridGeometry, VoxelGrid
from .nifti import write_volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.csv'
FOLD_PLAN_NAME = 'fold_plan.cfg'


@dataclass(frozen=True)
class PhantomConfig:
    """Draw ranges for the phantom generator; radii in voxels"""

    shape: Tuple[int, int, int] = (64, 64, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_intensity: float = 100.0
    enhancing_intensity: float = 300.0
    noise_std: float = 8.0
    cavity_radius: Tuple[float, float] = (8.0, 11.0)
    max_tumor_blobs: int = 3
    tumor_radius: Tuple[float, float] = (4.0, 6.0)
    blood_blobs: Tuple[int, int] = (1, 2)
    blood_radius: Tuple[float, float] = (4.0, 5.0)
    n_hospitals: int = 5
    n_predictions: int = 0

    def __post_init__(self) -> None:
        if min(self.shape) < 24:
            raise InvalidArgumentError(f"Phantom shape {self.shape} is too small; need >= 24 per axis")
        if self.blood_blobs[0] < 1:
            raise InvalidArgumentError('At least one blood blob is required')
        if self.n_hospitals < 1:
            raise InvalidArgumentError('n_hospitals must be >= 1')
        if not 0 <= self.n_predictions <= 5:
            raise InvalidArgumentError('n_predictions must be in [0, 5]')


@dataclass(frozen=True)
class Blob:
    center: Tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class PhantomVolumes:
    t1ce: VoxelGrid
    t1w: VoxelGrid
    brain: BinaryMask
    gt: BinaryMask
    pre_label: BinaryMask
    tumor_blobs: Tuple[Blob, ...]
    blood_blobs: Tuple[Blob, ...]


def _ball(coords: np.ndarray, blob: Blob) -> np.ndarray:
    offset = coords - np.asarray(blob.center).reshape(3, 1, 1, 1)
    return (offset ** 2).sum(axis=0) <= blob.radius ** 2


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _place_blood(
    rng: np.random.Generator,
    brain_center: np.ndarray,
    semi_axes: np.ndarray,
    radius: float,
    avoid: List[Blob],
) -> Blob:
    """First candidate clear of every blob in ``avoid``, else the farthest of 32 draws"""
    best, best_gap = None, -np.inf
    for _ in range(32):
        center = brain_center + 0.6 * semi_axes * rng.uniform(-1.0, 1.0, size=3)
        gap = min(
            (np.linalg.norm(center - np.asarray(b.center)) - b.radius - radius for b in avoid),
            default=np.inf,
        )
        if gap > 3.0:
            return Blob(tuple(float(c) for c in center), radius)
        if gap > best_gap:
            best, best_gap = center, gap
    return Blob(tuple(float(c) for c in best), radius)


def generate_phantom(rng: np.random.Generator, config: PhantomConfig = PhantomConfig()) -> PhantomVolumes:
    """Build one synthetic patient in memory"""
    geometry = GridGeometry.from_spacing(config.shape, config.spacing)
    shape = np.asarray(config.shape, dtype=np.float64)
    coords = np.indices(config.shape, dtype=np.float64)

    brain_center = (shape - 1) / 2.0
    semi_axes = 0.42 * shape
    offset = (coords - brain_center.reshape(3, 1, 1, 1)) / semi_axes.reshape(3, 1, 1, 1)
    brain = (offset ** 2).sum(axis=0) <= 1.0

    cavity = Blob(
        tuple(float(c) for c in brain_center + rng.uniform(-2.0, 2.0, size=3)),
        float(rng.uniform(*config.cavity_radius)),
    )
    n_tumor = int(rng.integers(0, config.max_tumor_blobs + 1))
    tumor_blobs = []
    for _ in range(n_tumor):
        center = np.asarray(cavity.center) + cavity.radius * _unit_vector(rng)
        tumor_blobs.append(Blob(tuple(float(c) for c in center), float(rng.uniform(*config.tumor_radius))))

    n_blood = int(rng.integers(config.blood_blobs[0], config.blood_blobs[1] + 1))
    blood_blobs: List[Blob] = []
    for _ in range(n_blood):
        radius = float(rng.uniform(*config.blood_radius))
        blood_blobs.append(_place_blood(rng, brain_center, semi_axes, radius, tumor_blobs + blood_blobs))

    tumor = np.zeros(config.shape, dtype=bool)
    for blob in tumor_blobs:
        tumor |= _ball(coords, blob)
    blood = np.zeros(config.shape, dtype=bool)
    for blob in blood_blobs:
        blood |= _ball(coords, blob)
    blood &= brain
    tumor &= brain & ~blood

    t1ce = np.where(brain, config.brain_intensity, 0.0)
    t1w = t1ce.copy()
    t1ce[tumor | blood] = config.enhancing_intensity
    t1w[blood] = config.enhancing_intensity
    t1ce[brain] += rng.normal(0.0, config.noise_std, size=int(brain.sum()))
    t1w[brain] += rng.normal(0.0, config.noise_std, size=int(brain.sum()))

    preop = (_ball(coords, Blob(cavity.center, cavity.radius + 2.0)) | tumor) & brain

    return PhantomVolumes(
        t1ce=VoxelGrid(geometry, t1ce.astype(np.float32)),
        t1w=VoxelGrid(geometry, t1w.astype(np.float32)),
        brain=BinaryMask(geometry, brain),
        gt=BinaryMask(geometry, tumor),
        pre_label=BinaryMask(geometry, preop),
        tumor_blobs=tuple(tumor_blobs),
        blood_blobs=tuple(blood_blobs),
    )


def hospital_code(index: int) -> str:
    return f'SYN{index}'


def phantom_fold_plan_text(n_hospitals: int) -> str:
    """One validation fold per hospital; the last hospital is held out for testing"""
    if n_hospitals == 1:
        return f'fold.0 = {hospital_code(0)}\n'
    lines = [f'fold.{k} = {hospital_code(k)}' for k in range(n_hospitals - 1)]
    lines.append(f'test = {hospital_code(n_hospitals - 1)}')
    return '\n'.join(lines) + '\n'


def generate_phantom_cohort(
    out_dir: Union[str, Path],
    n_patients: int,
    seed: int = 0,
    config: Optional[PhantomConfig] = None,
) -> CohortManifest:
    """
    Write a seeded synthetic cohort to ``out_dir``

    Every patient gets its own generator seeded with (seed, index), so a
    patient's volumes do not depend on how many patients are generated.
    Volumes are written uncompressed, which keeps same-seed runs
    byte-identical.

    Returns:
        The cohort as re-read from the written manifest
    """
    if n_patients < 1:
        raise InvalidArgumentError(f"n_patients must be >= 1, got {n_patients}")
    config = config or PhantomConfig()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise VolumeIOError(f"Cannot create {out_dir}: {e}") from None

    records = []
    for index in range(n_patients):
        rng = np.random.default_rng([seed, index])
        hospital = hospital_code(index % config.n_hospitals)
        patient_id = f'{hospital}-{index:03d}'
        patient_dir = out_dir / patient_id
        try:
            patient_dir.mkdir(exist_ok=True)
        except OSError as e:
            raise VolumeIOError(f"Cannot create {patient_dir}: {e}") from None

        phantom = generate_phantom(rng, config)
        paths = {
            't1ce': write_volume(phantom.t1ce, patient_dir / 't1ce.nii'),
            't1w': write_volume(phantom.t1w, patient_dir / 't1w.nii'),
            'brain_mask': write_volume(phantom.brain, patient_dir / 'brain_mask.nii'),
            'gt': write_volume(phantom.gt, patient_dir / 'gt.nii'),
            'pre_label': write_volume(phantom.pre_label, patient_dir / 'pre_label.nii'),
        }
        prob = VoxelGrid(phantom.gt.geometry, phantom.gt.data.astype(np.float32), PROBABILITY)
        for k in range(config.n_predictions):
            paths[f'pred_{k}'] = write_volume(prob, patient_dir / f'pred_{k}.nii')

        logger.debug(
            f"{patient_id}: {len(phantom.tumor_blobs)} tumor, {len(phantom.blood_blobs)} blood blobs, "
            f"GT {phantom.gt.volume_ml():.3f} ml"
        )
        records.append(PatientRecord(patient_id, hospital, paths, gt_volume_ml=phantom.gt.volume_ml()))

    manifest_path = write_manifest(CohortManifest(tuple(records)), out_dir / MANIFEST_NAME)
    try:
        (out_dir / FOLD_PLAN_NAME).write_text(phantom_fold_plan_text(config.n_hospitals))
    except OSError as e:
        raise VolumeIOError(f"Cannot write fold plan in {out_dir}: {e}") from None
    logger.info(f"Generated {n_patients} phantom patients in {out_dir}")
    return load_manifest(manifest_path)
