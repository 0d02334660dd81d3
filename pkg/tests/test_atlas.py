import numpy as np
import pytest

from patchseg.atlas import atlas_argmax, build_atlas, load_atlas, query_atlas, save_atlas
from patchseg.volume import LabelMap


def _lm(arr, n):
    return LabelMap(np.asarray(arr), n)


def test_single_map_all_background():
    a = build_atlas([_lm(np.zeros((3, 3, 3), int), 4)], 1e-3)
    assert np.allclose(a.probs[..., 0], 1.001 / 1.004, atol=1e-12)
    assert abs(a.probs[0, 0, 0, 0] - 0.997012) < 1e-6
    assert np.allclose(a.probs[..., 1:], 0.001 / 1.004, atol=1e-12)
    assert abs(a.probs[0, 0, 0, 1] - 0.000996) < 1e-6


def test_disagreement_splits_evenly():
    a = build_atlas([_lm(np.ones((2, 2, 2), int), 3), _lm(np.full((2, 2, 2), 2), 3)], 0.0)
    assert np.all(a.probs[..., 1] == 0.5) and np.all(a.probs[..., 2] == 0.5)


def test_unanimous_is_one_hot():
    lab = np.random.default_rng(0).integers(0, 5, (4, 4, 4))
    a = build_atlas([_lm(lab, 5)] * 3, 0.0)
    assert np.array_equal(a.probs, np.eye(5)[lab])


def test_smoothing_formula_against_counts():
    rng = np.random.default_rng(1)
    maps = [rng.integers(0, 4, (5, 4, 3)) for _ in range(6)]
    eps = 0.05
    a = build_atlas([_lm(m, 4) for m in maps], eps)
    for c in range(4):
        count = sum((m == c).astype(float) for m in maps)
        assert np.allclose(a.probs[..., c], (count + eps) / (6 + 4 * eps), atol=1e-12)


def test_sum_to_one_full_scan():
    rng = np.random.default_rng(2)
    a = build_atlas([_lm(rng.integers(0, 8, (16, 16, 16)), 8) for _ in range(5)])
    assert np.max(np.abs(a.probs.sum(-1) - 1)) < 1e-6 and np.all(a.probs >= 0)


def test_permutation_invariant():
    rng = np.random.default_rng(3)
    maps = [_lm(rng.integers(0, 3, (4, 4, 4)), 3) for _ in range(4)]
    assert np.array_equal(build_atlas(maps).probs, build_atlas(maps[::-1]).probs)


def test_single_map_argmax_reproduces_it():
    lab = np.random.default_rng(4).integers(0, 6, (7, 5, 3))
    a = build_atlas([_lm(lab, 6)], 0.0)
    assert np.array_equal(atlas_argmax(a).labels, lab)


def test_majority_survives_small_epsilon():
    rng = np.random.default_rng(5)
    n = 5
    maps = [rng.integers(0, 3, (6, 6, 6)) for _ in range(n)]
    a = build_atlas([_lm(m, 3) for m in maps], 1 / (2 * n) * 0.9)
    counts = np.stack([sum((m == c) for m in maps) for c in range(3)], -1)
    top = counts.max(-1)
    strict = (counts == top[..., None]).sum(-1) == 1
    for v in np.argwhere(strict):
        assert np.argmax(query_atlas(a, v)) == np.argmax(counts[tuple(v)])


def test_query():
    a = build_atlas([_lm(np.zeros((3, 3, 3), int), 4)])
    assert np.allclose(query_atlas(a, (1, 1, 1)).sum(), 1)
    assert np.array_equal(query_atlas(a, (1, 1, 1)), a.probs[1, 1, 1])
    assert np.allclose(query_atlas(a, (-1, 0, 0)), 0.25)
    batch = query_atlas(a, [(0, 0, 0), (3, 0, 0), (2, 2, 2)])
    assert np.allclose(batch[1], 0.25) and np.array_equal(batch[2], a.probs[2, 2, 2])


def test_errors():
    with pytest.raises(ValueError):
        build_atlas([_lm(np.zeros((3, 3, 3), int), 2), _lm(np.zeros((3, 3, 4), int), 2)])
    with pytest.raises(ValueError):
        build_atlas([_lm(np.zeros((3, 3, 3), int), 2)], -1.0)


def test_save_load(tmp_path):
    rng = np.random.default_rng(6)
    a = build_atlas([_lm(rng.integers(0, 4, (5, 6, 7)), 4) for _ in range(3)])
    save_atlas(tmp_path / "a.mrv", a)
    b = load_atlas(tmp_path / "a.mrv")
    assert b.dims == a.dims and b.num_classes == 4
    assert np.allclose(b.probs, a.probs, atol=1e-7)
