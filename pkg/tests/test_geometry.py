"""Icosphere grids, refinement neighborhoods, pair selection, TDOA tables."""

import os

import numpy as np
import pytest

from earshot.config import MicSpec
from earshot.geometry import (ArrayModel, GeometryError, build_icosphere,
                              load_pair_table, refinement_neighbors,
                              save_pair_table, select_pairs, table_cache_key,
                              tdoa_table)

from conftest import FS, SPEED, circular_mics, corner_cube_mics, face_cube_mics


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("level,count", [(0, 12), (1, 42), (2, 162), (3, 642), (4, 2562)])
def test_icosphere_cardinality(level, count):
    grid = build_icosphere(level)
    assert grid.n_points == count
    # all points distinct and on the unit sphere
    assert np.unique(np.round(grid.points, 9), axis=0).shape[0] == count
    assert np.allclose(np.linalg.norm(grid.points, axis=1), 1.0, atol=1e-12)


def test_icosphere_half_sphere_keeps_equator():
    full = build_icosphere(2)
    half = build_icosphere(2, half_sphere=True)
    assert half.n_points == np.count_nonzero(full.points[:, 2] >= -1e-6)
    assert half.points[:, 2].min() >= -1e-6


def test_icosphere_deterministic_order():
    a = build_icosphere(3).points
    b = build_icosphere(3).points
    assert np.array_equal(a, b)
    # lexicographic by (x, y, z)
    keys = [tuple(p) for p in a]
    assert keys == sorted(keys)


def test_icosphere_rejects_bad_level():
    with pytest.raises(ValueError):
        build_icosphere(7)


def test_refinement_neighborhoods_cover_fine_grid():
    coarse = build_icosphere(2)
    fine = build_icosphere(4)
    nbrs = refinement_neighbors(coarse, fine)
    assert len(nbrs) == coarse.n_points
    covered = np.zeros(fine.n_points, bool)
    for n in nbrs:
        covered[n] = True
    assert covered.all()
    # each neighborhood is a small fraction of the fine grid
    assert max(len(n) for n in nbrs) < 0.25 * fine.n_points


def test_refinement_requires_finer_grid():
    g2, g4 = build_icosphere(2), build_icosphere(4)
    with pytest.raises(ValueError):
        refinement_neighbors(g4, g2)


# ---------------------------------------------------------------------------
# Pair selection
# ---------------------------------------------------------------------------

def test_omni_array_keeps_all_pairs():
    array = ArrayModel.from_mics(circular_mics(8))
    pairs = select_pairs(array, build_icosphere(4))
    assert len(pairs) == 28


def test_face_cube_drops_antipodal_face_pairs():
    array = ArrayModel.from_mics(face_cube_mics())
    pairs = select_pairs(array, build_icosphere(4))
    assert len(pairs) == 20
    # the 8 dropped pairs are exactly the opposite-face combinations
    dropped = {(i, j) for i in range(8) for j in range(i + 1, 8)} - set(pairs)
    assert len(dropped) == 8
    ori = array.orientations
    assert all(np.dot(ori[i], ori[j]) == pytest.approx(-1.0) for i, j in dropped)


def test_back_to_back_narrow_mics_cannot_localize():
    mics = [
        MicSpec(position_m=(0.05, 0.0, 0.0), orientation=(1.0, 0.0, 0.0), fov_deg=90.0),
        MicSpec(position_m=(-0.05, 0.0, 0.0), orientation=(-1.0, 0.0, 0.0), fov_deg=90.0),
    ]
    with pytest.raises(GeometryError):
        select_pairs(ArrayModel.from_mics(mics), build_icosphere(4))


def test_select_pairs_requires_two_mics():
    one = ArrayModel.from_mics([MicSpec(position_m=(0.0, 0.0, 0.0))])
    with pytest.raises(GeometryError):
        select_pairs(one, build_icosphere(2))


# ---------------------------------------------------------------------------
# TDOA tables
# ---------------------------------------------------------------------------

def _two_mic_table(d_axis, grid, fs=FS, rate=1):
    mics = [
        MicSpec(position_m=tuple(+0.5 * np.asarray(d_axis))),
        MicSpec(position_m=tuple(-0.5 * np.asarray(d_axis))),
    ]
    array = ArrayModel.from_mics(mics)
    return tdoa_table(array, grid, fs, SPEED, rate, [(0, 1)])


def test_tdoa_worked_example():
    # Baseline 0.343 m along z; a wave from +z reaches mic 0 first:
    # tdoa = fs * (p0 - p1) . d / c = 16000 * 0.343 / 343 = 16 samples.
    # Level-1 grids contain (0, 0, 1) exactly (midpoint of two vertices).
    grid = build_icosphere(1)
    table = _two_mic_table([0.0, 0.0, 0.343], grid)
    idx = int(np.argmax(grid.points[:, 2]))
    assert np.allclose(grid.points[idx], [0.0, 0.0, 1.0], atol=1e-15)
    assert table.tdoa[0, idx] == pytest.approx(16.0, abs=1e-9)
    assert table.max_tdoa_samples[0] == pytest.approx(16.0)


def test_tdoa_orthogonal_direction_is_zero():
    grid = build_icosphere(2)
    table = _two_mic_table([0.343, 0.0, 0.0], grid)
    # grid points orthogonal to the baseline: x == 0
    orth = np.abs(grid.points[:, 0]) < 1e-12
    assert orth.any()
    assert np.abs(table.tdoa[0, orth]).max() < 1e-9


def test_tdoa_scales_with_rate_and_fs():
    grid = build_icosphere(1)
    t1 = _two_mic_table([0.343, 0.0, 0.0], grid, fs=FS, rate=1)
    t4 = _two_mic_table([0.343, 0.0, 0.0], grid, fs=FS, rate=4)
    assert np.array_equal(t4.center, np.rint(4 * t1.tdoa).astype(np.int32))
    t2fs = _two_mic_table([0.343, 0.0, 0.0], grid, fs=2 * FS, rate=1)
    assert np.allclose(t2fs.tdoa, 2 * t1.tdoa)


def test_tdoa_antisymmetry():
    grid = build_icosphere(2)
    array = ArrayModel.from_mics(circular_mics(4))
    ab = tdoa_table(array, grid, FS, SPEED, 1, [(0, 1)])
    ba = tdoa_table(array, grid, FS, SPEED, 1, [(1, 0)])
    assert np.allclose(ab.tdoa, -ba.tdoa, atol=1e-12)


def test_tdoa_rotation_invariance():
    """Rotating array and grid together leaves every TDOA unchanged."""
    grid = build_icosphere(2)
    mics = circular_mics(4)
    array = ArrayModel.from_mics(mics)
    pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    base = tdoa_table(array, grid, FS, SPEED, 1, pairs)

    th = 0.7
    rot = np.array([[np.cos(th), -np.sin(th), 0.0],
                    [np.sin(th), np.cos(th), 0.0],
                    [0.0, 0.0, 1.0]])
    rot_array = ArrayModel(positions=array.positions @ rot.T,
                           orientations=array.orientations @ rot.T,
                           fov_rad=array.fov_rad, sigma_pos=array.sigma_pos)
    from earshot.geometry import ScanGrid
    rot_grid = ScanGrid(points=grid.points @ rot.T, level=grid.level,
                        half_sphere=grid.half_sphere)
    rotated = tdoa_table(rot_array, rot_grid, FS, SPEED, 1, pairs)
    assert np.allclose(rotated.tdoa, base.tdoa, atol=1e-9)


def test_uncertainty_widens_windows():
    grid = build_icosphere(1)
    mics = [
        MicSpec(position_m=(0.1715, 0.0, 0.0), sigma_pos_m=0.005),
        MicSpec(position_m=(-0.1715, 0.0, 0.0), sigma_pos_m=0.005),
    ]
    array = ArrayModel.from_mics(mics)
    tight = tdoa_table(array, grid, FS, SPEED, 4, [(0, 1)], speed_uncertainty=0.0)
    wide = tdoa_table(array, grid, FS, SPEED, 4, [(0, 1)], speed_uncertainty=10.0)
    assert tight.halfwidth.max() >= 1          # 1 cm position slack is visible
    assert (wide.halfwidth >= tight.halfwidth).all()
    assert (wide.halfwidth > tight.halfwidth).any()


# ---------------------------------------------------------------------------
# Table cache
# ---------------------------------------------------------------------------

def test_pair_table_cache_round_trip(tmp_path):
    grid = build_icosphere(2)
    array = ArrayModel.from_mics(circular_mics(4))
    pairs = select_pairs(array, grid)
    table = tdoa_table(array, grid, FS, SPEED, 4, pairs)
    key = table_cache_key(array, grid, FS, SPEED, 4)
    path = os.path.join(tmp_path, "table.npz")
    save_pair_table(path, table, key)
    loaded = load_pair_table(path, key)
    assert loaded.pairs == table.pairs
    assert np.array_equal(loaded.center, table.center)
    assert np.array_equal(loaded.halfwidth, table.halfwidth)
    assert np.allclose(loaded.tdoa, table.tdoa)
    assert loaded.fs == FS and loaded.interpolation_rate == 4


def test_pair_table_cache_rejects_wrong_key(tmp_path):
    grid = build_icosphere(2)
    array = ArrayModel.from_mics(circular_mics(4))
    table = tdoa_table(array, grid, FS, SPEED, 4, [(0, 1)])
    path = os.path.join(tmp_path, "table.npz")
    save_pair_table(path, table, "right-key")
    with pytest.raises(ValueError):
        load_pair_table(path, "wrong-key")


def test_cache_key_tracks_geometry():
    grid = build_icosphere(2)
    a = ArrayModel.from_mics(circular_mics(4))
    b = ArrayModel.from_mics(circular_mics(4, radius=0.2))
    assert table_cache_key(a, grid, FS, SPEED, 4) != table_cache_key(b, grid, FS, SPEED, 4)
    assert table_cache_key(a, grid, FS, SPEED, 4) == table_cache_key(a, grid, FS, SPEED, 4)
