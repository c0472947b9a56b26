"""
Experiment harness

Runs one experiment over a cohort: obtain a probability map per patient
(external model outputs or the baseline segmenter), post-process it, score
it against the ground truth, then pool the scores per protocol.

Validation patients are scored with their own fold's prediction and the
patient-wise metrics are pooled across folds. Test patients get the average
of every available prediction map and are scored once.
"""

import atexit
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

from .baseline import baseline_segment
from .cohort import TEST, CohortManifest, FoldAssignment, FoldPlan, HospitalCounts, PatientRecord
from .cohort import assign_folds, manifest_fold_assignment
from .errors import ConfigError, ExperimentError, ResectEvalError
from .grid import EPMR_T1W, TRILINEAR, BinaryMask, InputConfiguration, VoxelGrid
from .grid import input_configuration, resample_to_reference
from .metrics import (
    ConfusionCounts,
    DetectionStatus,
    PooledStat,
    detection_metrics,
    dice,
    group_dice,
    jaccard,
    patient_detection_status,
    pooled_stats,
)
from .nifti import read_mask, read_probability, read_volume, write_volume
from .postprocess import compute_eor, ensemble_average, run_postprocess
from .preview import render_overlay, write_preview
from .utils import create_default_config, load_config, validate_experiment_config

logger = logging.getLogger(__name__)

VALIDATION = 'validation'
PROTOCOLS = (VALIDATION, TEST)

EXTERNAL = 'external'
BASELINE = 'baseline'

T = TypeVar('T')
R = TypeVar('R')


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = 'residual-tumor'
    architecture: str = 'baseline-otsu'
    input_configuration: str = 'B'
    prediction_source: str = BASELINE
    threshold: float = 0.5
    connectivity: int = 26
    min_voxels: int = 20
    cutoff_ml: float = 0.175
    dice_floor: float = 0.01
    detection_rule: str = 'detection-loose'
    std_ddof: int = 0
    workers: int = 1
    output_dir: str = 'results'
    formats: Tuple[str, ...] = ('csv', 'markdown')
    save_masks: bool = False
    save_previews: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, 'formats', tuple(self.formats))
        valid, message = validate_experiment_config(asdict(self))
        if not valid:
            raise ConfigError(message)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> 'ExperimentConfig':
        """Defaults overridden by ``values``; unknown keys raise ConfigError"""
        merged = create_default_config()
        unknown = sorted(set(values) - set(merged))
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {unknown}")
        merged.update(values)
        return cls(**merged)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        return cls.from_dict(load_config(path))

    def replace(self, **changes: Any) -> 'ExperimentConfig':
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)

    @property
    def configuration(self) -> InputConfiguration:
        return input_configuration(self.input_configuration)


@dataclass(frozen=True)
class PatientResult:
    """Outcome for one patient; failed patients carry only ids and a message"""

    patient_id: str
    hospital: str
    fold: str
    success: bool
    message: str = ''
    gt_volume_ml: Optional[float] = None
    pred_volume_ml: Optional[float] = None
    dice: Optional[float] = None
    jaccard: Optional[float] = None
    status: Optional[str] = None
    gt_classification: Optional[str] = None
    classification: Optional[str] = None
    n_predictions: int = 0
    preop_volume_ml: Optional[float] = None
    eor: Optional[float] = None
    eor_clamped: Optional[bool] = None

    @property
    def protocol(self) -> str:
        return TEST if self.fold == TEST else VALIDATION

    def detection(self) -> DetectionStatus:
        return DetectionStatus(self.status, self.gt_volume_ml, self.pred_volume_ml, self.dice)

    def to_row(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ProtocolSummary:
    protocol: str
    n_patients: int
    counts: ConfusionCounts
    dsc_p: PooledStat
    dsc_tp: PooledStat
    recall: PooledStat
    precision: PooledStat
    f1: PooledStat
    specificity: PooledStat
    balanced_accuracy: PooledStat
    folds: Tuple[str, ...] = ()

    @property
    def sensitivity(self) -> PooledStat:
        return self.recall


@dataclass(frozen=True)
class MetricReport:
    config: ExperimentConfig
    patients: Tuple[PatientResult, ...]
    protocols: Mapping[str, ProtocolSummary]
    hospital_counts: Mapping[str, HospitalCounts] = field(default_factory=dict)

    @property
    def experiment(self) -> str:
        return self.config.experiment

    @property
    def architecture(self) -> str:
        return self.config.architecture

    @property
    def input_configuration(self) -> str:
        return self.config.input_configuration

    @property
    def failures(self) -> List[PatientResult]:
        return [p for p in self.patients if not p.success]


def _pool_folds(values: Sequence[Optional[float]], ddof: int) -> PooledStat:
    if not values:
        return PooledStat.undefined()
    return pooled_stats(values, ddof)


def summarize_protocol(
    results: Sequence[PatientResult], protocol: str, cutoff_ml: float = 0.175, ddof: int = 0
) -> Optional[ProtocolSummary]:
    """
    Pool the scores of one protocol's successful patients

    Dice groups pool over patients. Patient-wise metrics are computed per
    fold and pooled over folds; the test protocol is a single fold, so its
    values come with n=1.
    """
    scored = [r for r in results if r.success and r.protocol == protocol]
    if not scored:
        return None
    statuses = [r.detection() for r in scored]
    dsc_p, dsc_tp = group_dice(statuses, cutoff_ml, ddof)

    by_fold: Dict[str, List[DetectionStatus]] = {}
    for result, status in zip(scored, statuses):
        by_fold.setdefault(result.fold, []).append(status)
    fold_ids = tuple(sorted(by_fold, key=lambda f: (f == TEST, int(f) if f != TEST else 0)))
    per_fold = [detection_metrics(ConfusionCounts.from_statuses(by_fold[f])) for f in fold_ids]

    def pool(name: str) -> PooledStat:
        return _pool_folds([getattr(m, name) for m in per_fold], ddof)

    return ProtocolSummary(
        protocol=protocol,
        n_patients=len(scored),
        counts=ConfusionCounts.from_statuses(statuses),
        dsc_p=dsc_p,
        dsc_tp=dsc_tp,
        recall=pool('recall'),
        precision=pool('precision'),
        f1=pool('f1'),
        specificity=pool('specificity'),
        balanced_accuracy=pool('balanced_accuracy'),
        folds=fold_ids,
    )


def summarize_results(
    results: Sequence[PatientResult], cutoff_ml: float = 0.175, ddof: int = 0
) -> Dict[str, ProtocolSummary]:
    summaries = {}
    for protocol in PROTOCOLS:
        summary = summarize_protocol(results, protocol, cutoff_ml, ddof)
        if summary is not None:
            summaries[protocol] = summary
    return summaries


def _failure(patient: PatientRecord, fold: str, message: str) -> PatientResult:
    logger.warning(f"Patient {patient.patient_id} failed: {message}")
    return PatientResult(patient.patient_id, patient.hospital, fold, False, message)


class ExperimentRunner:
    """
    Scores a cohort under one experiment configuration

    Patients are evaluated on a thread pool and results are collected in
    manifest order, so the report does not depend on the worker count.

    Example:
        >>> with ExperimentRunner(ExperimentConfig(workers=4)) as runner:
        ...     report = runner.run(cohort, plan)
    """

    def __init__(self, config: ExperimentConfig, workers: Optional[int] = None) -> None:
        self.config = config
        self.workers = workers or config.workers
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.workers > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix='resect-eval')
        atexit.register(self._cleanup)

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply ``fn`` to every item, returning results in input order"""
        if self._executor is None:
            return [fn(item) for item in items]
        return list(self._executor.map(fn, items))

    def run(self, cohort: CohortManifest, plan: Optional[FoldPlan] = None) -> MetricReport:
        """
        Evaluate every patient and pool the results

        Args:
            cohort: Patients to score
            plan: Fold plan; when None the manifest's ``fold`` column is used

        Raises:
            ExperimentError: empty cohort or every patient failed
            PlanError: the plan does not cover a cohort hospital
        """
        if cohort.is_empty:
            raise ExperimentError('Cohort has no patients')
        assignment = assign_folds(cohort, plan) if plan is not None else manifest_fold_assignment(cohort)
        logger.info(
            f"Running {self.config.experiment} ({self.config.architecture}, configuration "
            f"{self.config.input_configuration}) on {len(cohort)} patients with {self.workers} worker(s)"
        )
        results = self.map(lambda patient: self.evaluate_patient(patient, assignment), list(cohort))

        failed = [r for r in results if not r.success]
        if len(failed) == len(results):
            raise ExperimentError(f"All {len(results)} patients failed; first error: {failed[0].message}")
        if failed:
            logger.warning(f"{len(failed)} of {len(results)} patients failed")

        volumes = {r.patient_id: r.gt_volume_ml for r in results if r.success}
        return MetricReport(
            config=self.config,
            patients=tuple(results),
            protocols=summarize_results(results, self.config.cutoff_ml, self.config.std_ddof),
            hospital_counts=cohort.hospital_counts(self.config.cutoff_ml, volumes),
        )

    def evaluate_patient(self, patient: PatientRecord, assignment: FoldAssignment) -> PatientResult:
        """Score one patient; input and format errors become a failed result"""
        fold = assignment.labels[patient.patient_id]
        try:
            return self._evaluate(patient, fold)
        except (ResectEvalError, OSError) as e:
            return _failure(patient, fold, str(e))

    def _predict(self, patient: PatientRecord, fold: str) -> Tuple[VoxelGrid, int]:
        cfg = self.config
        if cfg.prediction_source == BASELINE:
            brain_path = patient.path('brain_mask')
            if brain_path is None:
                raise ExperimentError('baseline segmentation needs a brain_mask')
            t1ce = read_volume(patient.path('t1ce'))
            t1w = read_volume(patient.path('t1w')) if EPMR_T1W in cfg.configuration.sequences else None
            return baseline_segment(t1ce, t1w, read_mask(brain_path)), 1

        predictions = patient.predictions
        if not predictions:
            raise ExperimentError('no prediction maps listed')
        if fold != TEST:
            return read_probability(predictions[0]), 1
        return ensemble_average([read_probability(p) for p in predictions]), len(predictions)

    def _evaluate(self, patient: PatientRecord, fold: str) -> PatientResult:
        cfg = self.config
        missing = patient.missing_inputs(cfg.configuration)
        if missing:
            return _failure(patient, fold, f"missing inputs for configuration {cfg.input_configuration}: {missing}")
        gt_path = patient.path('gt')
        if gt_path is None:
            return _failure(patient, fold, 'no ground-truth annotation listed')

        gt = read_mask(gt_path)
        prob, n_predictions = self._predict(patient, fold)
        if not prob.geometry.matches(gt.geometry):
            logger.debug(f"{patient.patient_id}: resampling prediction onto the annotation grid")
            prob = resample_to_reference(prob, gt.geometry, TRILINEAR)

        mask, verdict = run_postprocess(prob, cfg.threshold, cfg.connectivity, cfg.min_voxels, cfg.cutoff_ml)
        gt_volume = gt.volume_ml()
        score = dice(gt, mask)
        status = patient_detection_status(
            gt_volume, verdict.residual_volume_ml, score, cfg.cutoff_ml, cfg.dice_floor, cfg.detection_rule
        )

        preop_volume = eor = eor_clamped = None
        pre_label = patient.path('pre_label')
        if pre_label is not None and pre_label.exists():
            preop_volume = read_mask(pre_label).volume_ml()
            if preop_volume > 0:
                extent = compute_eor(preop_volume, verdict.residual_volume_ml)
                eor, eor_clamped = extent.eor, extent.clamped
            else:
                logger.warning(f"{patient.patient_id}: pre-operative label is empty; EOR not computed")

        self._save_outputs(patient, gt, mask)
        logger.debug(
            f"{patient.patient_id}: gt {gt_volume:.3f} ml, pred {verdict.residual_volume_ml:.3f} ml, {status.status}"
        )
        return PatientResult(
            patient_id=patient.patient_id,
            hospital=patient.hospital,
            fold=fold,
            success=True,
            gt_volume_ml=gt_volume,
            pred_volume_ml=verdict.residual_volume_ml,
            dice=score,
            jaccard=jaccard(gt, mask),
            status=status.status,
            gt_classification='RT' if gt_volume >= cfg.cutoff_ml else 'GTR',
            classification=verdict.classification,
            n_predictions=n_predictions,
            preop_volume_ml=preop_volume,
            eor=eor,
            eor_clamped=eor_clamped,
        )

    def _save_outputs(self, patient: PatientRecord, gt: BinaryMask, mask: BinaryMask) -> None:
        cfg = self.config
        out_dir = Path(cfg.output_dir)
        if cfg.save_masks:
            (out_dir / 'masks').mkdir(parents=True, exist_ok=True)
            write_volume(mask, out_dir / 'masks' / f'{patient.patient_id}.nii.gz')
        if cfg.save_previews:
            t1ce_path = patient.path('t1ce')
            if t1ce_path is None or not t1ce_path.exists():
                logger.debug(f"{patient.patient_id}: no T1w-CE scan, preview skipped")
                return
            (out_dir / 'previews').mkdir(parents=True, exist_ok=True)
            background = read_volume(t1ce_path)
            if not background.geometry.matches(gt.geometry):
                background = resample_to_reference(background, gt.geometry, TRILINEAR)
            write_preview(render_overlay(background, gt, mask), out_dir / 'previews' / f'{patient.patient_id}.png')

    def _cleanup(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def close(self) -> None:
        """Shut down the worker pool and drop the exit hook"""
        self._cleanup()
        atexit.unregister(self._cleanup)

    def __enter__(self) -> 'ExperimentRunner':
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self._cleanup()
        except Exception:
            pass


def run_experiment(
    config: ExperimentConfig, cohort: CohortManifest, plan: Optional[FoldPlan] = None
) -> MetricReport:
    """Run one experiment with a short-lived runner"""
    with ExperimentRunner(config) as runner:
        return runner.run(cohort, plan)
