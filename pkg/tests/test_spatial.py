import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchseg.spatial import as_planes, build_grid, distance_image, rbf_normalize


def test_k2_corners():
    g = build_grid((65, 65, 65), 2)
    pos = g.positions
    assert pos.shape == (8, 3)
    assert {tuple(p) for p in pos} == {(x, y, z) for x in (0, 64) for y in (0, 64) for z in (0, 64)}


def test_k3_axes():
    g = build_grid((65, 65, 65), 3)
    for ax in g.axes:
        assert list(ax) == [0, 32, 64]


def test_k5_anisotropic():
    g = build_grid((64, 32, 16), 5)
    assert np.allclose(g.axes[0], [0, 15.75, 31.5, 47.25, 63], atol=0)


def test_k_too_small():
    with pytest.raises(ValueError):
        build_grid((10, 10, 10), 1)


def test_positions_first_index_fastest():
    g = build_grid((9, 9, 9), 3)
    pos = g.positions
    assert tuple(pos[1]) == (4, 0, 0) and tuple(pos[3]) == (0, 4, 0) and tuple(pos[9]) == (0, 0, 4)


def test_distance_matches_positions_oracle():
    g = build_grid((30, 20, 10), 4)
    x = np.array([3.0, 17.0, 5.0])
    d = distance_image(g, x)
    brute = np.linalg.norm(g.positions - x, axis=1)
    assert np.allclose(d.ravel(order="F"), brute, atol=1e-12)


def test_on_landmark_zero_others_positive():
    g = build_grid((65, 65, 65), 3)
    d = distance_image(g, (32, 0, 64))
    assert d[1, 0, 2] == 0
    assert np.sum(d == 0) == 1 and np.all(d[d != 0] > 0)


def test_center_distance():
    d = distance_image(build_grid((65, 65, 65), 2), (32, 32, 32))
    assert np.allclose(d, 32 * math.sqrt(3), atol=1e-9)
    assert abs(d[0, 0, 0] - 55.4256) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 40), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_lipschitz_in_position(x, delta):
    g = build_grid((41, 41, 41), 4)
    x, delta = np.array(x), np.array(delta)
    diff = np.abs(distance_image(g, x + delta) - distance_image(g, x))
    assert diff.max() <= np.linalg.norm(delta) + 1e-9


def test_batch_matches_single():
    g = build_grid((20, 20, 20), 3)
    pts = np.array([[1, 2, 3], [19, 0, 7]])
    batch = distance_image(g, pts)
    assert batch.shape == (2, 3, 3, 3)
    assert np.array_equal(batch[1], distance_image(g, pts[1]))


def test_spacing_gives_mm():
    g = build_grid((11, 11, 11), 2, spacing=(2.0, 1.0, 1.0))
    assert distance_image(g, (0, 0, 0))[1, 0, 0] == 20.0


def test_as_planes_layout():
    d = np.arange(27.0).reshape(3, 3, 3)
    p = as_planes(d)
    # channel c holds landmarks whose last index is c
    for c in range(3):
        assert np.array_equal(p[c], d[:, :, c])


def test_rbf_values():
    assert rbf_normalize(np.array(0.0)) == 1.0
    assert abs(rbf_normalize(np.array(10.0), 0.01) - math.exp(-1)) < 1e-9
    assert abs(rbf_normalize(np.array(10.0), 0.01) - 0.367879) < 1e-6
    with pytest.raises(ValueError):
        rbf_normalize(np.array(1.0), 0.0)


def test_rbf_monotone_and_invertible():
    d = np.sort(np.random.default_rng(0).uniform(0, 30, 200))
    y = rbf_normalize(d, 0.01)
    assert np.all(np.diff(y) <= 0)
    assert np.allclose(-np.log(y) / 0.01, d**2, atol=1e-9)
