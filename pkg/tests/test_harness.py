"""Tests for the experiment harness"""

from unittest.mock import patch

import numpy as np
import pytest

from resect_eval.cohort import CohortManifest, FoldPlan, PatientRecord, load_fold_plan
from resect_eval.errors import ConfigError, CorruptFileError, ExperimentError, PlanError
from resect_eval.grid import PROBABILITY, BinaryMask, GridGeometry, VoxelGrid
from resect_eval.harness import TEST, VALIDATION, ExperimentConfig, ExperimentRunner, run_experiment
from resect_eval.metrics import FN, TN, TP
from resect_eval.nifti import read_mask, write_volume
from resect_eval.phantom import FOLD_PLAN_NAME, PhantomConfig, generate_phantom_cohort
from resect_eval.report import emit_report
from tests.conftest import cube

SHAPE = (12, 12, 12)


def _write_patient(root, patient_id, hospital, gt, preds, fold=None):
    """Write a minimal patient (T1w-CE, GT and prediction maps) and return its record"""
    geometry = GridGeometry.from_spacing(SHAPE)
    folder = root / patient_id
    folder.mkdir()
    paths = {
        't1ce': write_volume(VoxelGrid(geometry, np.full(SHAPE, 100.0)), folder / 't1ce.nii'),
        'gt': write_volume(BinaryMask(geometry, gt), folder / 'gt.nii'),
    }
    for k, pred in enumerate(preds):
        prob = VoxelGrid(geometry, np.asarray(pred, dtype=np.float32), PROBABILITY)
        paths[f'pred_{k}'] = write_volume(prob, folder / f'pred_{k}.nii')
    return PatientRecord(patient_id, hospital, paths, fold=fold)


def _external(tmp_path, **changes):
    values = dict(
        prediction_source='external', architecture='external', input_configuration='A',
        output_dir=str(tmp_path / 'results'),
    )
    values.update(changes)
    return ExperimentConfig(**values)


def _small_cohort(root, prediction):
    """Two validation folds and a test hospital; RT patients get ``prediction(gt)``"""
    rt = cube(SHAPE, (3, 3, 3), 6)
    empty = np.zeros(SHAPE, dtype=np.uint8)
    records = []
    for i, (hospital, fold) in enumerate([('A', '0'), ('A', '0'), ('B', '1'), ('B', '1'), ('C', 'test')]):
        gt = rt if i % 2 == 0 else empty
        preds = [prediction(gt)] * (3 if fold == 'test' else 1)
        records.append(_write_patient(root, f'p{i}', hospital, gt, preds, fold))
    return CohortManifest(tuple(records))


def test_config_validation():
    config = ExperimentConfig()
    assert config.configuration.label == 'B'
    assert config.formats == ('csv', 'markdown')
    assert config.replace(workers=3).workers == 3
    with pytest.raises(ConfigError):
        ExperimentConfig(threshold=2.0)
    with pytest.raises(ConfigError):
        ExperimentConfig(input_configuration='E')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({'max_epochs': 10})
    assert ExperimentConfig.from_dict({'min_voxels': 5}).min_voxels == 5


def test_config_from_file(tmp_path):
    path = tmp_path / 'experiment.cfg'
    path.write_text('prediction_source = external\ninput_configuration = d\nformats = csv\n')
    config = ExperimentConfig.from_file(path)
    assert config.input_configuration == 'D'
    assert config.formats == ('csv',)


def test_perfect_predictions(tmp_path):
    cohort = _small_cohort(tmp_path, lambda gt: gt)
    report = run_experiment(_external(tmp_path), cohort)

    assert [p.patient_id for p in report.patients] == ['p0', 'p1', 'p2', 'p3', 'p4']
    assert [p.status for p in report.patients] == [TP, TN, TP, TN, TP]
    assert report.patients[0].dice == 1.0
    assert report.patients[0].jaccard == 1.0
    assert report.patients[1].dice is None
    assert report.patients[4].n_predictions == 3
    assert report.patients[0].n_predictions == 1
    assert report.failures == []

    validation = report.protocols[VALIDATION]
    assert validation.folds == ('0', '1')
    assert validation.n_patients == 4
    assert validation.dsc_p.mean == 1.0
    assert validation.recall.mean == 1.0 and validation.recall.n == 2
    assert validation.specificity.mean == 1.0

    test = report.protocols[TEST]
    assert test.n_patients == 1
    assert test.dsc_tp.mean == 1.0 and test.dsc_tp.n == 1
    assert test.specificity.n == 0


def test_empty_predictions(tmp_path):
    cohort = _small_cohort(tmp_path, lambda gt: np.zeros(SHAPE))
    report = run_experiment(_external(tmp_path), cohort)
    assert [p.status for p in report.patients] == [FN, TN, FN, TN, FN]
    assert [p.classification for p in report.patients] == ['GTR'] * 5
    assert [p.gt_classification for p in report.patients] == ['RT', 'GTR', 'RT', 'GTR', 'RT']
    validation = report.protocols[VALIDATION]
    assert validation.dsc_p.mean == 0.0
    assert not validation.dsc_tp.defined
    assert validation.recall.mean == 0.0
    assert validation.f1.n == 0
    assert validation.balanced_accuracy.mean == 0.5


def test_ensemble_feeds_test_patients(tmp_path):
    gt = cube(SHAPE, (3, 3, 3), 6)
    low = gt * 0.4
    high = gt * 0.8
    record = _write_patient(tmp_path, 't0', 'C', gt, [low, high], 'test')
    other = _write_patient(tmp_path, 'v0', 'A', gt, [low, high], '0')
    report = run_experiment(_external(tmp_path), CohortManifest((record, other)))
    by_id = {p.patient_id: p for p in report.patients}
    # mean of 0.4 and 0.8 reaches the 0.5 threshold; the first map alone does not
    assert by_id['t0'].status == TP
    assert by_id['v0'].status == FN


def test_fold_plan_assignment(tmp_path):
    cohort = _small_cohort(tmp_path, lambda gt: gt)
    plan = FoldPlan({0: frozenset({'A', 'B'})}, frozenset({'C'}))
    report = run_experiment(_external(tmp_path), cohort, plan)
    assert [p.fold for p in report.patients] == ['0', '0', '0', '0', 'test']
    assert report.protocols[VALIDATION].folds == ('0',)
    with pytest.raises(PlanError):
        run_experiment(_external(tmp_path), cohort, FoldPlan({0: frozenset({'A'})}))


def test_unreadable_volume_fails_one_patient(tmp_path):
    cohort = _small_cohort(tmp_path, lambda gt: gt)
    broken = cohort.by_id('p2').path('gt')

    def flaky_read_mask(path):
        if path == broken:
            raise CorruptFileError(f"{path}: payload unreadable")
        return read_mask(path)

    with patch('resect_eval.harness.read_mask', side_effect=flaky_read_mask):
        report = run_experiment(_external(tmp_path), cohort)

    assert len(report.failures) == 1
    failed = report.failures[0]
    assert failed.patient_id == 'p2'
    assert 'payload unreadable' in failed.message
    assert failed.dice is None
    assert report.protocols[VALIDATION].n_patients == 3
    assert report.hospital_counts['B'].patients == 2


def test_all_patients_failing_is_an_experiment_error(tmp_path):
    cohort = _small_cohort(tmp_path, lambda gt: gt)
    with patch('resect_eval.harness.read_mask', side_effect=CorruptFileError('bad file')):
        with pytest.raises(ExperimentError):
            run_experiment(_external(tmp_path), cohort)


def test_empty_cohort_is_an_experiment_error(tmp_path):
    with pytest.raises(ExperimentError):
        run_experiment(_external(tmp_path), CohortManifest(()))


def test_missing_inputs_are_reported(tmp_path):
    cohort = _small_cohort(tmp_path, lambda gt: gt)
    no_preds = PatientRecord('p9', 'A', {'t1ce': cohort.by_id('p0').path('t1ce'), 'gt': cohort.by_id('p0').path('gt')}, fold='0')
    report = run_experiment(_external(tmp_path), CohortManifest(cohort.patients + (no_preds,)))
    assert report.failures[0].patient_id == 'p9'
    assert 'no prediction maps' in report.failures[0].message

    with pytest.raises(ExperimentError):
        run_experiment(_external(tmp_path, input_configuration='C'), cohort)


def test_prediction_on_another_grid_is_resampled(tmp_path):
    gt = cube(SHAPE, (2, 2, 2), 8)
    fine = GridGeometry.from_spacing((24, 24, 24), (0.5, 0.5, 0.5), (-0.25, -0.25, -0.25))
    record = _write_patient(tmp_path, 'p0', 'A', gt, [], '0')
    pred_path = write_volume(
        VoxelGrid(fine, np.repeat(np.repeat(np.repeat(gt, 2, 0), 2, 1), 2, 2).astype(np.float32), PROBABILITY),
        tmp_path / 'p0' / 'pred_0.nii',
    )
    record = PatientRecord('p0', 'A', dict(record.paths, pred_0=pred_path), fold='0')
    report = run_experiment(_external(tmp_path), CohortManifest((record,)))
    assert report.patients[0].success
    assert report.patients[0].dice == pytest.approx(1.0)


def test_runner_map_preserves_order():
    with ExperimentRunner(ExperimentConfig(), workers=4) as runner:
        assert runner.map(lambda x: x * x, list(range(50))) == [x * x for x in range(50)]
    assert runner._executor is None


def test_close_drops_exit_hook():
    with patch('resect_eval.harness.atexit') as hook:
        runner = ExperimentRunner(ExperimentConfig(), workers=2)
        hook.register.assert_called_once_with(runner._cleanup)
        runner.close()
        hook.unregister.assert_called_once_with(runner._cleanup)
    assert runner._executor is None


def test_saves_masks_and_previews(tmp_path):
    cohort = generate_phantom_cohort(tmp_path / 'cohort', 2, seed=3, config=PhantomConfig(n_predictions=1))
    config = _external(tmp_path, input_configuration='B', save_masks=True, save_previews=True)
    report = run_experiment(config, cohort)
    out = tmp_path / 'results'
    for patient in report.patients:
        assert (out / 'masks' / f'{patient.patient_id}.nii.gz').exists()
        assert (out / 'previews' / f'{patient.patient_id}.png').read_bytes()[:4] == b'\x89PNG'


@pytest.mark.slow
def test_phantom_cohort_end_to_end(tmp_path):
    cohort = generate_phantom_cohort(tmp_path / 'cohort', 20, seed=7)
    plan = load_fold_plan(tmp_path / 'cohort' / FOLD_PLAN_NAME)
    config = ExperimentConfig(output_dir=str(tmp_path / 'serial'))

    report = run_experiment(config, cohort, plan)
    assert report.failures == []
    assert set(report.protocols) == {VALIDATION, TEST}
    for patient in report.patients:
        assert patient.classification == patient.gt_classification
        if patient.gt_classification == 'RT':
            assert patient.dice >= 0.95
        assert patient.eor is not None and 0.0 <= patient.eor <= 1.0
    assert sum(c.patients for c in report.hospital_counts.values()) == 20

    parallel = run_experiment(config.replace(workers=4, output_dir=str(tmp_path / 'parallel')), cohort, plan)
    serial_files = emit_report(report)
    parallel_files = emit_report(parallel)
    assert [p.name for p in serial_files] == [p.name for p in parallel_files]
    for a, b in zip(serial_files, parallel_files):
        assert a.read_bytes() == b.read_bytes()
