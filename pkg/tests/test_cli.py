"""Tests for the command line interface"""

import json

import numpy as np
import pytest

from resect_eval.cli import build_parser, main
from resect_eval.grid import PROBABILITY, BinaryMask, GridGeometry, VoxelGrid
from resect_eval.nifti import read_mask, read_volume, write_volume
from tests.conftest import cube


@pytest.fixture
def prob_file(tmp_path):
    geometry = GridGeometry.from_spacing((12, 12, 12))
    data = cube((12, 12, 12), (2, 2, 2), 6).astype(np.float32) * 0.9
    data[11, 11, 11] = 0.8
    return write_volume(VoxelGrid(geometry, data, PROBABILITY), tmp_path / 'prob.nii.gz')


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(['--version'])
    assert exc.value.code == 0
    assert '1.0.0' in capsys.readouterr().out


def test_postprocess_json(tmp_path, prob_file, capsys):
    out = tmp_path / 'mask.nii.gz'
    assert main(['postprocess', '--prob', str(prob_file), '--out', str(out), '--json']) == 0
    record = json.loads(capsys.readouterr().out)
    assert record['classification'] == 'RT'
    assert record['volume_ml'] == pytest.approx(0.216)
    assert record['parameters']['min_voxels'] == 20
    assert read_mask(out).count == 216


def test_postprocess_writes_mask_and_verdict_files(tmp_path, prob_file):
    mask_path = tmp_path / 'refined.nii.gz'
    verdict_path = tmp_path / 'verdict.json'
    assert main(['postprocess', '--prob', str(prob_file), '--threshold', '0.85',
                 '--out-mask', str(mask_path), '--out-verdict', str(verdict_path)]) == 0

    record = json.loads(verdict_path.read_text())
    assert record['classification'] == 'RT'
    assert record['volume_ml'] == pytest.approx(0.216)
    assert record['cutoff_ml'] == 0.175
    assert record['parameters'] == {'threshold': 0.85, 'connectivity': 26, 'min_voxels': 20, 'cutoff_ml': 0.175}
    assert read_mask(mask_path).count == 216

    args = build_parser().parse_args(['postprocess', '--prob', 'p.nii', '--out-mask', 'm.nii', '--out-verdict', 'v.json'])
    assert (args.out_mask, args.out_verdict) == ('m.nii', 'v.json')


def test_postprocess_text_output(prob_file, capsys):
    assert main(['postprocess', '--prob', str(prob_file), '--cutoff-ml', '0.3']) == 0
    out = capsys.readouterr().out
    assert 'Classification: GTR' in out


def test_missing_file_prints_json_error(tmp_path, capsys):
    assert main(['postprocess', '--prob', str(tmp_path / 'absent.nii')]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['success'] is False
    assert error['error'] == 'io-error'


def test_classify_eval_counts(capsys):
    assert main(['classify-eval', '--counts', '51', '1', '21', '0']) == 0
    out = capsys.readouterr().out
    assert 'Sensitivity: 100.00' in out
    assert 'Specificity: 4.55' in out
    assert 'bAcc: 52.27' in out


def test_ensemble_and_sweep(tmp_path, prob_file, capsys):
    out = tmp_path / 'mean.nii'
    assert main(['ensemble', '--probs', str(prob_file), str(prob_file), '--out', str(out)]) == 0
    assert np.allclose(read_volume(out).data, read_volume(prob_file).data)

    table = tmp_path / 'sweep.csv'
    assert main(['sweep', '--prob', str(out), '--steps', '5', '--out', str(table)]) == 0
    assert len(table.read_text().strip().splitlines()) == 6


def test_interrater_consensus(tmp_path, capsys):
    geometry = GridGeometry.from_spacing((6, 6, 6))
    paths = []
    for i in range(3):
        data = cube((6, 6, 6), (1, 1, 1), 3)
        data[5, 5, i] = 1
        paths.append(str(write_volume(BinaryMask(geometry, data), tmp_path / f'rater{i}.nii')))
    out = tmp_path / 'raters.csv'
    assert main(['interrater', '--annotations', *paths, '--names', 'r0', 'r1', 'r2',
                 '--reference', 'consensus', '--out', str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == 'rater,jaccard,dice'
    assert lines[1].startswith('r0,0.96428')

    assert main(['interrater', '--annotations', *paths, '--names', 'r0', '--reference', 'consensus']) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['error'] == 'invalid-argument'


def test_interrater_group_ranges(tmp_path, capsys):
    geometry = GridGeometry.from_spacing((6, 6, 6))
    reference = cube((6, 6, 6), (0, 0, 0), 4)
    ref_path = write_volume(BinaryMask(geometry, reference), tmp_path / 'reference.nii')
    paths = []
    for i, size in enumerate((4, 3, 2)):
        paths.append(str(write_volume(BinaryMask(geometry, cube((6, 6, 6), (0, 0, 0), size)), tmp_path / f'a{i}.nii')))
    out = tmp_path / 'groups.csv'
    assert main(['interrater', '--annotations', *paths, '--names', 'expert', 'novice', 'model',
                 '--groups', 'experts', 'novices', '-', '--reference', str(ref_path), '--groups-out', str(out)]) == 0

    lines = out.read_text().strip().splitlines()
    assert lines[0] == 'group,raters,jaccard_min,jaccard_max,jaccard_mean,dice_min,dice_max,dice_mean'
    assert lines[1] == 'experts,1,1.0,1.0,1.0,1.0,1.0,1.0'
    assert lines[2].startswith('novices,1,0.421875,0.421875,0.421875,')
    assert len(lines) == 3

    assert main(['interrater', '--annotations', *paths, '--groups', 'experts', '--reference', str(ref_path)]) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['error'] == 'invalid-argument'


def test_preview_and_preprocess(tmp_path, prob_file):
    png = tmp_path / 'qc.png'
    assert main(['preview', '--image', str(prob_file), '--colormap', 'jet', '--out', str(png)]) == 0
    assert png.read_bytes()[:4] == b'\x89PNG'

    brain = write_volume(BinaryMask(GridGeometry.from_spacing((12, 12, 12)), np.ones((12, 12, 12))),
                         tmp_path / 'brain.nii')
    out = tmp_path / 'pre.nii'
    assert main(['preprocess', '--image', str(prob_file), '--brain', str(brain), '--out', str(out)]) == 0
    assert read_volume(out).geometry.shape == (24, 24, 12)


def test_synth_evaluate_report(tmp_path, capsys):
    cohort = tmp_path / 'cohort'
    assert main(['synth', '--out', str(cohort), '--patients', '3', '--seed', '5']) == 0
    results = tmp_path / 'results'
    assert main(['evaluate', '--manifest', str(cohort / 'manifest.csv'),
                 '--fold-plan', str(cohort / 'fold_plan.cfg'), '--output-dir', str(results)]) == 0
    assert (results / 'patients.csv').exists()
    assert (results / 'segmentation.md').exists()

    tables = tmp_path / 'tables'
    assert main(['report', '--patients', str(results / 'patients.csv'), '--output-dir', str(tables),
                 '--formats', 'csv']) == 0
    assert (tables / 'classification.csv').read_text() == (results / 'classification.csv').read_text()

    assert main(['classify-eval', '--patients', str(results / 'patients.csv')]) == 0
    assert 'TP=' in capsys.readouterr().out


def test_evaluate_rejects_uncovered_hospitals(tmp_path, capsys):
    cohort = tmp_path / 'cohort'
    assert main(['synth', '--out', str(cohort), '--patients', '1']) == 0
    code = main(['evaluate', '--manifest', str(cohort / 'manifest.csv'), '--default-fold-plan',
                 '--output-dir', str(tmp_path / 'results')])
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['error'] == 'plan-error'
