"""Tests for binarization, component filtering, residual volume and verdicts"""

from collections import deque
from itertools import product

import numpy as np
import pytest

from tests.conftest import cube
from resect_eval.errors import IncompatibleGridsError, InvalidArgumentError
from resect_eval.grid import PROBABILITY, GridGeometry, VoxelGrid
from resect_eval.postprocess import (
    GTR,
    RT,
    binarize,
    classify_resection,
    compute_eor,
    connected_components,
    ensemble_average,
    filter_small_components,
    residual_volume_ml,
    run_postprocess,
    threshold_sweep,
)


def test_binarize_is_inclusive(make_prob):
    prob = make_prob(np.array([0.0, 0.49, 0.5, 1.0]).reshape(4, 1, 1))
    assert binarize(prob, 0.5).data.ravel().tolist() == [0, 0, 1, 1]
    assert binarize(prob, 1.0).data.ravel().tolist() == [0, 0, 0, 1]
    assert binarize(prob, 0.0).count == 4


def test_binarize_rejects_bad_inputs(make_prob, geometry):
    prob = make_prob(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidArgumentError):
        binarize(prob, 1.5)
    with pytest.raises(InvalidArgumentError):
        binarize(VoxelGrid(geometry, np.zeros(geometry.shape)), 0.5)


def test_connectivity_of_diagonal_neighbours(make_mask):
    edge = np.zeros((3, 3, 3), dtype=np.uint8)
    edge[0, 0, 1] = edge[1, 1, 1] = 1
    corner = np.zeros((3, 3, 3), dtype=np.uint8)
    corner[0, 0, 0] = corner[1, 1, 1] = 1

    assert connected_components(make_mask(edge), 6).count == 2
    assert connected_components(make_mask(edge), 18).count == 1
    assert connected_components(make_mask(edge), 26).count == 1
    assert connected_components(make_mask(corner), 18).count == 2
    assert connected_components(make_mask(corner), 26).count == 1
    with pytest.raises(InvalidArgumentError):
        connected_components(make_mask(edge), 8)


def test_component_labels_follow_linear_index_order(make_mask):
    data = np.zeros((6, 6, 6), dtype=np.uint8)
    data[0, 0, 5] = 1      # linear index 180
    data[4, 0, 0] = 1      # linear index 4
    data[0, 3, 0] = 1      # linear index 18
    labeling = connected_components(make_mask(data), 6)
    assert labeling.count == 3
    assert labeling.labels[4, 0, 0] == 1
    assert labeling.labels[0, 3, 0] == 2
    assert labeling.labels[0, 0, 5] == 3
    assert labeling.components[0].bbox == ((4, 5), (0, 1), (0, 1))


def test_empty_mask_has_no_components(make_mask):
    labeling = connected_components(make_mask(np.zeros((4, 4, 4))))
    assert labeling.count == 0
    assert np.all(labeling.labels == 0)


def test_filter_keeps_20_voxels_drops_19(make_mask):
    data = np.zeros((30, 10, 10), dtype=np.uint8)
    data[0:20, 0, 0] = 1
    data[0:19, 5, 5] = 1
    labeling = connected_components(make_mask(data))
    assert sorted(labeling.voxel_counts()) == [19, 20]
    kept = filter_small_components(labeling, 20)
    assert kept.count == 20
    assert kept.data[0:20, 0, 0].all()
    assert not kept.data[:, 5, 5].any()
    with pytest.raises(InvalidArgumentError):
        filter_small_components(labeling, 0)


def test_filter_output_is_subset_and_idempotent(make_mask, rng):
    data = (rng.random((12, 12, 12)) > 0.7).astype(np.uint8)
    mask = make_mask(data)
    once = filter_small_components(connected_components(mask, 6), 5)
    twice = filter_small_components(connected_components(once, 6), 5)
    assert np.all(once.data <= mask.data)
    assert np.array_equal(once.data, twice.data)


@pytest.mark.parametrize('volume,expected', [(0.0, GTR), (0.174, GTR), (0.175, RT), (12.0, RT)])
def test_classify_resection_cutoff(volume, expected):
    assert classify_resection(volume).classification == expected


def test_classify_resection_rejects_bad_values():
    with pytest.raises(InvalidArgumentError):
        classify_resection(-0.1)
    with pytest.raises(InvalidArgumentError):
        classify_resection(1.0, 0.0)


def test_175_voxel_residual_is_rt_at_1mm(make_prob):
    data = np.zeros((40, 10, 10))
    data[0:35, 0:5, 0] = 1.0
    result = run_postprocess(make_prob(data))
    assert result.mask.count == 175
    assert result.verdict.residual_volume_ml == pytest.approx(0.175)
    assert result.verdict.classification == RT

    data[0, 0:5, 0] = 0.0
    assert run_postprocess(make_prob(data)).verdict.classification == GTR


def test_run_postprocess_on_empty_map_is_gtr(make_prob):
    result = run_postprocess(make_prob(np.zeros((8, 8, 8))))
    assert result.mask.count == 0
    assert result.verdict.residual_volume_ml == 0.0
    assert result.verdict.is_gtr
    assert result.verdict.to_dict() == {'volume_ml': 0.0, 'classification': GTR, 'cutoff_ml': 0.175}


def test_run_postprocess_removes_speckle(make_prob):
    data = cube((20, 20, 20), (2, 2, 2), 6).astype(np.float64)
    data[15, 15, 15] = 0.9
    data[18, 2, 17] = 0.6
    result = run_postprocess(make_prob(data))
    assert result.mask.count == 216
    assert result.mask.data[15, 15, 15] == 0


def _flood_fill_labels(data, connectivity):
    """Breadth-first fill, seeding components in x-fastest linear order"""
    offsets = [
        d for d in product((-1, 0, 1), repeat=3)
        if d != (0, 0, 0) and sum(abs(v) for v in d) <= {6: 1, 18: 2, 26: 3}[connectivity]
    ]
    labels = np.zeros(data.shape, dtype=np.int32)
    count = 0
    for flat in np.flatnonzero(data.ravel(order='F')):
        start = tuple(int(i) for i in np.unravel_index(flat, data.shape, order='F'))
        if labels[start]:
            continue
        count += 1
        labels[start] = count
        queue = deque([start])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in offsets:
                p = (x + dx, y + dy, z + dz)
                if all(0 <= p[i] < data.shape[i] for i in range(3)) and data[p] and not labels[p]:
                    labels[p] = count
                    queue.append(p)
    return labels


@pytest.mark.slow
def test_component_partition_matches_flood_fill(rng, make_mask):
    for trial in range(1000):
        shape = tuple(int(n) for n in rng.integers(1, 9, size=3))
        data = (rng.random(shape) < rng.uniform(0.1, 0.6)).astype(np.uint8)
        connectivity = (6, 18, 26)[trial % 3]
        labeling = connected_components(make_mask(data), connectivity)
        expected = _flood_fill_labels(data, connectivity)
        assert np.array_equal(labeling.labels, expected)
        assert labeling.count == int(expected.max())
        assert labeling.voxel_counts() == [int(np.count_nonzero(expected == k)) for k in range(1, labeling.count + 1)]


def test_binarize_is_monotone_in_threshold(make_prob, rng):
    for _ in range(50):
        prob = make_prob(rng.random((6, 6, 6)))
        low, high = sorted(rng.random(2))
        assert np.all(binarize(prob, high).data <= binarize(prob, low).data)
        assert binarize(prob, low).count >= binarize(prob, high).count


@pytest.mark.parametrize('connectivity', [6, 18, 26])
def test_run_postprocess_matches_step_by_step(make_prob, rng, connectivity):
    for _ in range(20):
        prob = make_prob(rng.random((10, 10, 10)) ** 2)
        threshold = float(rng.uniform(0.2, 0.8))
        min_voxels = int(rng.integers(1, 30))
        cutoff_ml = float(rng.uniform(0.01, 0.3))

        result = run_postprocess(prob, threshold, connectivity, min_voxels, cutoff_ml)
        mask = filter_small_components(connected_components(binarize(prob, threshold), connectivity), min_voxels)
        verdict = classify_resection(residual_volume_ml(mask), cutoff_ml)
        assert np.array_equal(result.mask.data, mask.data)
        assert result.verdict == verdict


def test_threshold_sweep_volume_is_monotone(make_prob, make_mask, rng):
    data = np.zeros((16, 16, 16))
    data[2:12, 2:12, 2:12] = rng.uniform(0.05, 1.0, size=(10, 10, 10))
    prob = make_prob(data)
    gt = make_mask((data >= 0.5).astype(np.uint8))
    rows = threshold_sweep(prob, gt, steps=11, min_voxels=1)
    assert [r['threshold'] for r in rows] == [round(t, 6) for t in np.linspace(0, 1, 11)]
    volumes = [r['pred_volume_ml'] for r in rows]
    assert all(a >= b for a, b in zip(volumes, volumes[1:]))
    assert rows[5]['dice'] == pytest.approx(1.0)
    with pytest.raises(InvalidArgumentError):
        threshold_sweep(prob, steps=1)


def test_ensemble_average_is_order_independent(rng):
    geometry = GridGeometry.from_spacing((5, 5, 5))
    probs = [VoxelGrid(geometry, rng.random((5, 5, 5)), PROBABILITY) for _ in range(5)]
    forward = ensemble_average(probs)
    backward = ensemble_average(probs[::-1])
    shuffled = ensemble_average([probs[i] for i in (2, 4, 0, 3, 1)])
    assert np.array_equal(forward.data, backward.data)
    assert np.array_equal(forward.data, shuffled.data)
    assert np.allclose(forward.data, np.mean([p.data for p in probs], axis=0))
    assert forward.kind == PROBABILITY


def test_ensemble_of_identical_maps_is_exact(rng):
    geometry = GridGeometry.from_spacing((4, 4, 4))
    prob = VoxelGrid(geometry, rng.random((4, 4, 4)), PROBABILITY)
    assert np.array_equal(ensemble_average([prob] * 3).data, prob.data)
    assert np.array_equal(ensemble_average([prob]).data, prob.data)


def test_ensemble_rejects_bad_inputs(rng):
    a = VoxelGrid(GridGeometry.from_spacing((4, 4, 4)), rng.random((4, 4, 4)), PROBABILITY)
    b = VoxelGrid(GridGeometry.from_spacing((4, 4, 3)), rng.random((4, 4, 3)), PROBABILITY)
    with pytest.raises(InvalidArgumentError):
        ensemble_average([])
    with pytest.raises(IncompatibleGridsError):
        ensemble_average([a, b])
    with pytest.raises(InvalidArgumentError):
        ensemble_average([a, a.with_data(a.data, 'raw')])


def test_compute_eor():
    eor = compute_eor(40.0, 2.0)
    assert eor.eor == pytest.approx(0.95)
    assert not eor.clamped
    assert compute_eor(10.0, 0.0).eor == 1.0

    clamped = compute_eor(1.0, 3.0)
    assert clamped.eor == 0.0
    assert clamped.clamped
    with pytest.raises(InvalidArgumentError):
        compute_eor(0.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        compute_eor(5.0, -1.0)


def test_filter_mixed_component_sizes(make_mask):
    data = np.zeros((50, 9, 9), dtype=np.uint8)
    data[0:5, 0, 0] = 1
    data[0:40, 2, 2] = 1
    data[0:19, 4, 4] = 1
    data[0:20, 6, 6] = 1
    kept = filter_small_components(connected_components(make_mask(data)), 20)
    assert kept.count == 60
