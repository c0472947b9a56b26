"""Shared fixtures: grid builders and seeded randomness"""

import numpy as np
import pytest

from resect_eval.grid import PROBABILITY, BinaryMask, GridGeometry, VoxelGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def geometry():
    return GridGeometry.from_spacing((8, 8, 8), (1.0, 1.0, 1.0))


@pytest.fixture
def make_mask():
    """Build a BinaryMask from an array on a 1 mm grid (or a given geometry)"""
    def _make(data, geometry=None):
        data = np.asarray(data)
        geometry = geometry or GridGeometry.from_spacing(data.shape)
        return BinaryMask(geometry, data)
    return _make


@pytest.fixture
def make_prob():
    """Build a probability VoxelGrid from an array on a 1 mm grid"""
    def _make(data, geometry=None):
        data = np.asarray(data, dtype=np.float64)
        geometry = geometry or GridGeometry.from_spacing(data.shape)
        return VoxelGrid(geometry, data, PROBABILITY)
    return _make


def cube(shape, start, size):
    """uint8 array with a filled box of ``size`` voxels per side at ``start``"""
    data = np.zeros(shape, dtype=np.uint8)
    x, y, z = start
    data[x:x + size, y:y + size, z:z + size] = 1
    return data
