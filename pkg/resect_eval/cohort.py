"""
Cohort manifests and hospital-stratified fold plans

A manifest is a CSV file with one row per patient. ``patient_id`` and
``hospital`` are required; the path columns are optional and relative paths
are resolved against the manifest's directory.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Mapping, Optional, Tuple, Union

import pandas as pd

from .errors import ConfigError, ManifestError, PlanError
from .grid import EPMR_FLAIR, EPMR_T1W, EPMR_T1WCE, PRE_LABEL, PRE_T1WCE, InputConfiguration
from .postprocess import DEFAULT_CUTOFF_ML
from .utils import read_key_value_file

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ('patient_id', 'hospital')
PREDICTION_COLUMNS = tuple(f'pred_{k}' for k in range(5))
PATH_COLUMNS = (
    't1ce', 't1w', 'flair', 'pre_t1ce', 'pre_label', 'gt', 'brain_mask'
) + PREDICTION_COLUMNS
METADATA_COLUMNS = ('fold', 'gt_volume_ml', 'acquisition_delay_days')
MANIFEST_COLUMNS = REQUIRED_COLUMNS + PATH_COLUMNS + METADATA_COLUMNS

# Manifest column holding each sequence role
ROLE_COLUMNS = {
    EPMR_T1WCE: 't1ce',
    EPMR_T1W: 't1w',
    EPMR_FLAIR: 'flair',
    PRE_T1WCE: 'pre_t1ce',
    PRE_LABEL: 'pre_label',
}

TEST = 'test'

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    hospital: str
    paths: Mapping[str, Path] = field(default_factory=dict)
    fold: Optional[str] = None
    gt_volume_ml: Optional[float] = None
    acquisition_delay_days: Optional[float] = None

    def path(self, column: str) -> Optional[Path]:
        return self.paths.get(column)

    @property
    def predictions(self) -> List[Path]:
        """Prediction maps pred_0..pred_4 that are present, in column order"""
        return [self.paths[c] for c in PREDICTION_COLUMNS if c in self.paths]

    def missing_inputs(self, configuration: InputConfiguration) -> List[str]:
        """Sequence roles the configuration needs that are absent or not on disk"""
        missing = []
        for role in configuration.sequences:
            path = self.path(ROLE_COLUMNS[role])
            if path is None or not path.exists():
                missing.append(role)
        return missing


@dataclass(frozen=True)
class HospitalCounts:
    hospital: str
    patients: int
    rt: int
    gtr: int

    @property
    def rt_ratio(self) -> Optional[float]:
        """Share of RT patients in percent, None when nothing is classified"""
        classified = self.rt + self.gtr
        if classified == 0:
            return None
        return 100.0 * self.rt / classified


@dataclass(frozen=True)
class CohortManifest:
    patients: Tuple[PatientRecord, ...]
    source: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self) -> Iterator[PatientRecord]:
        return iter(self.patients)

    @property
    def is_empty(self) -> bool:
        return not self.patients

    @property
    def hospitals(self) -> List[str]:
        """Hospital codes in order of first appearance"""
        return list(dict.fromkeys(p.hospital for p in self.patients))

    def by_id(self, patient_id: str) -> PatientRecord:
        for patient in self.patients:
            if patient.patient_id == patient_id:
                return patient
        raise KeyError(patient_id)

    def hospital_counts(
        self,
        cutoff_ml: float = DEFAULT_CUTOFF_ML,
        volumes: Optional[Mapping[str, float]] = None,
    ) -> Dict[str, HospitalCounts]:
        """
        Patients and RT/GTR split per hospital

        Args:
            cutoff_ml: Residual volume at or above which a patient is RT
            volumes: Measured GT volumes by patient id. Falls back to the
                manifest's ``gt_volume_ml``; patients with neither are
                counted but not classified.
        """
        volumes = volumes or {}
        tally: Dict[str, List[int]] = {h: [0, 0, 0] for h in self.hospitals}
        for patient in self.patients:
            volume = volumes.get(patient.patient_id, patient.gt_volume_ml)
            counts = tally[patient.hospital]
            counts[0] += 1
            if volume is None:
                continue
            if volume >= cutoff_ml:
                counts[1] += 1
            else:
                counts[2] += 1
        return {h: HospitalCounts(h, *c) for h, c in tally.items()}


def _optional_float(value: str, column: str, patient_id: str) -> Optional[float]:
    if value == '':
        return None
    try:
        return float(value)
    except ValueError:
        raise ManifestError(f"Patient {patient_id}: {column} is not a number: '{value}'") from None


def load_manifest(path: PathLike) -> CohortManifest:
    """
    Read and validate a cohort manifest CSV

    Raises:
        ManifestError: unreadable file, missing required column, blank or
            duplicate patient id, non-numeric metadata
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        logger.warning(f"Manifest {path} is empty")
        return CohortManifest((), path)
    except (OSError, pd.errors.ParserError) as e:
        raise ManifestError(f"Cannot read manifest {path}: {e}") from None

    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"Manifest {path} is missing required columns: {missing}")
    unknown = [c for c in frame.columns if c not in MANIFEST_COLUMNS]
    if unknown:
        logger.debug(f"Ignoring manifest columns {unknown}")
    frame = frame.apply(lambda column: column.str.strip())

    if (frame['patient_id'] == '').any():
        raise ManifestError(f"Manifest {path} has rows without a patient_id")
    duplicated = frame.loc[frame['patient_id'].duplicated(), 'patient_id'].unique().tolist()
    if duplicated:
        raise ManifestError(f"Manifest {path} has duplicate patient ids: {duplicated}")

    base = path.parent
    records = []
    for row in frame.to_dict('records'):
        patient_id = row['patient_id']
        paths = {}
        for column in PATH_COLUMNS:
            value = row.get(column, '')
            if value:
                candidate = Path(value)
                paths[column] = candidate if candidate.is_absolute() else base / candidate
        records.append(
            PatientRecord(
                patient_id=patient_id,
                hospital=row['hospital'],
                paths=paths,
                fold=row.get('fold') or None,
                gt_volume_ml=_optional_float(row.get('gt_volume_ml', ''), 'gt_volume_ml', patient_id),
                acquisition_delay_days=_optional_float(
                    row.get('acquisition_delay_days', ''), 'acquisition_delay_days', patient_id
                ),
            )
        )

    if not records:
        logger.warning(f"Manifest {path} lists no patients")
    else:
        logger.info(f"Loaded {len(records)} patients from {len(set(r.hospital for r in records))} hospitals")
    return CohortManifest(tuple(records), path)


def _format_optional(value: Optional[float]) -> str:
    return '' if value is None else repr(float(value))


def write_manifest(cohort: CohortManifest, path: PathLike) -> Path:
    """Write a manifest CSV; paths are stored relative to its directory when possible"""
    path = Path(path)
    base = path.parent.resolve()
    rows = []
    for patient in cohort:
        row = {'patient_id': patient.patient_id, 'hospital': patient.hospital}
        for column in PATH_COLUMNS:
            value = patient.path(column)
            if value is None:
                row[column] = ''
                continue
            try:
                row[column] = Path(os.path.relpath(Path(value).resolve(), base)).as_posix()
            except ValueError:
                row[column] = str(value)
        row['fold'] = patient.fold or ''
        row['gt_volume_ml'] = _format_optional(patient.gt_volume_ml)
        row['acquisition_delay_days'] = _format_optional(patient.acquisition_delay_days)
        rows.append(row)
    frame = pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS))
    try:
        frame.to_csv(path, index=False, lineterminator='\n')
    except OSError as e:
        raise ManifestError(f"Cannot write manifest {path}: {e}") from None
    return path


@dataclass(frozen=True)
class FoldPlan:
    """Validation hospitals per fold plus the held-out test hospitals"""

    folds: Mapping[int, FrozenSet[str]]
    test: FrozenSet[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.folds:
            raise PlanError('A fold plan needs at least one fold')
        seen: Dict[str, str] = {}
        groups = [(f'fold {k}', h) for k, h in sorted(self.folds.items())] + [(TEST, self.test)]
        for name, hospitals in groups:
            for hospital in hospitals:
                if hospital in seen:
                    raise PlanError(f"Hospital {hospital} appears in both {seen[hospital]} and {name}")
                seen[hospital] = name

    @property
    def fold_ids(self) -> List[int]:
        return sorted(self.folds)

    @property
    def hospitals(self) -> FrozenSet[str]:
        return frozenset().union(*self.folds.values(), self.test)

    def label_of(self, hospital: str) -> Optional[str]:
        """Fold id as a string, 'test', or None when the plan does not cover it"""
        if hospital in self.test:
            return TEST
        for k, hospitals in self.folds.items():
            if hospital in hospitals:
                return str(k)
        return None


def _split_codes(value: str) -> FrozenSet[str]:
    return frozenset(code.strip() for code in value.split(',') if code.strip())


def load_fold_plan(path: PathLike) -> FoldPlan:
    """
    Read a fold plan: ``fold.<k> = CODE, CODE`` lines and one ``test = CODE`` line

    Raises:
        PlanError: unknown key, non-integer fold id, or overlapping hospitals
    """
    try:
        raw = read_key_value_file(path)
    except ConfigError as e:
        raise PlanError(str(e)) from None
    folds: Dict[int, FrozenSet[str]] = {}
    test: FrozenSet[str] = frozenset()
    for key, value in raw.items():
        if key == TEST:
            test = _split_codes(value)
        elif key.startswith('fold.'):
            try:
                fold_id = int(key[len('fold.'):])
            except ValueError:
                raise PlanError(f"{path}: fold id in '{key}' is not an integer") from None
            folds[fold_id] = _split_codes(value)
        else:
            raise PlanError(f"{path}: unknown key '{key}'")
    return FoldPlan(folds, test)


def default_fold_plan() -> FoldPlan:
    """The shipped five-fold plan over the twelve hospitals"""
    return load_fold_plan(os.path.join(os.path.dirname(__file__), 'data', 'reference_fold_plan.cfg'))


@dataclass(frozen=True)
class FoldAssignment:
    """Per-patient fold labels: a fold id as a string, or 'test'"""

    labels: Mapping[str, str]
    fold_ids: Tuple[int, ...]

    def validation_ids(self, fold: int) -> List[str]:
        return [p for p, label in self.labels.items() if label == str(fold)]

    def train_ids(self, fold: int) -> List[str]:
        return [p for p, label in self.labels.items() if label not in (str(fold), TEST)]

    def test_ids(self) -> List[str]:
        return [p for p, label in self.labels.items() if label == TEST]

    def counts(self, fold: int) -> Tuple[int, int]:
        """(train, validation) patient counts for one fold"""
        return len(self.train_ids(fold)), len(self.validation_ids(fold))


def assign_folds(cohort: CohortManifest, plan: FoldPlan) -> FoldAssignment:
    """
    Label every patient with its hospital's fold

    Raises:
        PlanError: a cohort hospital is not covered by the plan
    """
    uncovered = [h for h in cohort.hospitals if plan.label_of(h) is None]
    if uncovered:
        raise PlanError(f"Fold plan does not cover hospitals: {uncovered}")
    labels = {p.patient_id: plan.label_of(p.hospital) for p in cohort}
    return FoldAssignment(labels, tuple(plan.fold_ids))


def manifest_fold_assignment(cohort: CohortManifest) -> FoldAssignment:
    """
    Fold labels taken from the manifest's ``fold`` column

    Patients without a fold go to fold 0.
    """
    labels = {}
    for patient in cohort:
        label = (patient.fold or '0').lower()
        if label != TEST:
            try:
                label = str(int(label))
            except ValueError:
                raise PlanError(f"Patient {patient.patient_id}: fold '{patient.fold}' is not an integer or 'test'") from None
        labels[patient.patient_id] = label
    fold_ids = tuple(sorted({int(v) for v in labels.values() if v != TEST}))
    return FoldAssignment(labels, fold_ids)
