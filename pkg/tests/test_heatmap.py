import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from antloc.heatmap import (CoordGrids, Heatmap3D, HeatmapConfig, dsnt_extract, hard_argmax, make_coord_grids,
                            render_gaussian_target, softmax_normalize)
from antloc.volume import Landmark, Volume3D, flip_landmark_x, flip_x, voxel_to_normalized

CUTOFF_RADIUS = 3.6717  # sqrt(4.5 ln 20) for sigma 1.5 mm and cutoff 0.05


def dirac(shape, idx):
    d = np.zeros(shape)
    d[tuple(idx)] = 1.0
    return Heatmap3D(Volume3D(d), normalized=True)


def test_config_validation():
    with pytest.raises(ValueError):
        HeatmapConfig(sigma_mm=0)
    with pytest.raises(ValueError):
        HeatmapConfig(cutoff=1.0)
    with pytest.raises(ValueError):
        HeatmapConfig(peak=2.0)
    assert HeatmapConfig().cutoff_radius_mm() == pytest.approx(math.sqrt(4.5 * math.log(20)))
    assert HeatmapConfig().cutoff_radius_mm() == pytest.approx(CUTOFF_RADIUS, abs=1e-4)


def test_gaussian_on_grid_peak_and_values():
    h = render_gaussian_target(Landmark("t", "voxel", (10, 10, 10)), (21, 21, 21))
    assert h.data[10, 10, 10] == 1.0
    assert h.data[11, 10, 10] == pytest.approx(math.exp(-1 / 4.5), abs=1e-12)
    assert h.data[11, 10, 10] == pytest.approx(0.80074, abs=1e-5)


def test_gaussian_cutoff_ball_exact():
    shape = (21, 21, 21)
    c = np.array([10.0, 10.0, 10.0])
    h = render_gaussian_target(Landmark("t", "voxel", c), shape)
    idx = np.stack(np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), -1)
    d = np.linalg.norm(idx - c, axis=-1)
    assert np.all(h.data[d > CUTOFF_RADIUS + 1e-9] == 0)
    assert np.all(h.data[d < CUTOFF_RADIUS - 1e-9] > 0)


def test_gaussian_off_grid_rescaled_after_cutoff():
    h = render_gaussian_target(Landmark("t", "voxel", (4.5, 4.5, 4.5)), (10, 10, 10))
    assert h.data.max() == pytest.approx(1.0)
    # before rescaling the best voxel is exp(-0.75/4.5); every value is divided by it
    raw = math.exp(-0.75 / 4.5)
    assert h.data[5, 5, 6] == pytest.approx(math.exp(-(0.25 + 0.25 + 2.25) / 4.5) / raw)


def test_gaussian_uses_mm():
    h = render_gaussian_target(Landmark("t", "voxel", (5, 5, 5)), (11, 11, 11), spacing_mm=(2.0, 1.0, 1.0))
    assert h.data[6, 5, 5] == pytest.approx(math.exp(-4 / 4.5))
    assert h.data[5, 6, 5] == pytest.approx(math.exp(-1 / 4.5))


def test_gaussian_out_of_bounds():
    with pytest.raises(ValueError):
        render_gaussian_target(Landmark("t", "voxel", (10, 0, 0)), (10, 10, 10))
    with pytest.raises(ValueError):
        render_gaussian_target(Landmark("t", "world_mm", (1, 1, 1)), (10, 10, 10))


def test_gaussian_flip_conjugation(rng):
    shape = (12, 9, 10)
    for _ in range(5):
        c = rng.uniform(0, np.array(shape) - 1)
        a = render_gaussian_target(Landmark("t", "voxel", c), shape)
        b = render_gaussian_target(flip_landmark_x(Landmark("t", "voxel", c), shape[0]), shape)
        np.testing.assert_allclose(flip_x(a.volume).data, b.data, atol=1e-6)


def test_heatmap_invariants():
    with pytest.raises(ValueError):
        Heatmap3D(Volume3D(-np.ones((2, 2, 2))))
    with pytest.raises(ValueError):
        Heatmap3D(Volume3D(np.ones((2, 2, 2))), normalized=True)


def test_softmax_examples(rng):
    u = softmax_normalize(np.zeros((3, 4, 5)))
    np.testing.assert_allclose(u.data, 1 / 60)
    spike = np.zeros((4, 4, 4))
    spike[1, 2, 3] = 1000
    s = softmax_normalize(spike)
    assert s.data[1, 2, 3] == pytest.approx(1.0) and s.data.sum() - s.data[1, 2, 3] < 1e-300
    f = rng.normal(size=(4, 4, 4))
    e = np.exp(f)
    np.testing.assert_allclose(softmax_normalize(f).data, e / e.sum(), atol=1e-6)
    with pytest.raises(ValueError):
        softmax_normalize(np.full((2, 2, 2), np.nan))


@given(st.integers(0, 2**31 - 1))
def test_softmax_sum_and_argmax(seed):
    f = np.random.default_rng(seed).normal(scale=5, size=(5, 4, 3))
    s = softmax_normalize(f)
    assert abs(s.data.sum() - 1) < 1e-5
    assert np.argmax(s.data) == np.argmax(f)


def test_hard_argmax_examples(rng):
    assert hard_argmax(dirac((8, 8, 8), (5, 6, 7))).coords == (5.0, 6.0, 7.0)
    h = np.zeros((4, 5, 6))
    h.reshape(-1)[[90, 10]] = 3.0
    assert hard_argmax(h).coords == tuple(float(i) for i in np.unravel_index(10, h.shape))
    f = rng.random((8, 8, 8))
    best = max(np.ndindex(f.shape), key=lambda i: (f[i], -np.ravel_multi_index(i, f.shape)))
    assert hard_argmax(f).coords == tuple(float(i) for i in best)


def test_coord_grids():
    g = make_coord_grids((3, 3, 3))
    np.testing.assert_allclose(g.X[:, 0, 0], [-1, 0, 1])
    assert (g.X[0, 0, 0], g.Y[0, 0, 0], g.Z[0, 0, 0]) == (-1, -1, -1)
    g = make_coord_grids((5, 6, 7))
    for arr in (g.X, g.Y, g.Z):
        assert arr.min() == -1 and arr.max() == 1
        assert abs(arr.sum()) < 1e-9
        assert not arr.flags.writeable
    assert np.ptp(g.X, axis=0).max() > 0 and np.ptp(g.X, axis=(1, 2)).max() == 0
    with pytest.raises(ValueError):
        make_coord_grids((1, 3, 3))
    assert isinstance(g, CoordGrids)


def test_dsnt_examples():
    np.testing.assert_allclose(dsnt_extract(dirac((5, 5, 5), (0, 0, 0))).coords, (-1, -1, -1))
    u = Heatmap3D(Volume3D(np.full((4, 5, 6), 1 / 120)), normalized=True)
    np.testing.assert_allclose(dsnt_extract(u).coords, (0, 0, 0), atol=1e-12)
    d = np.zeros((3, 3, 3))
    d[0, 1, 1] = d[2, 1, 1] = 0.5
    np.testing.assert_allclose(dsnt_extract(Heatmap3D(Volume3D(d), True)).coords, (0, 0, 0), atol=1e-12)
    with pytest.raises(ValueError):
        dsnt_extract(Heatmap3D(Volume3D(d)))


def test_dsnt_matches_weighted_mean(rng):
    shape = (4, 5, 6)
    p = rng.random(shape)
    p /= p.sum()
    idx = np.stack(np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), -1)
    ref = (p[..., None] * voxel_to_normalized(idx, shape)).sum(axis=(0, 1, 2))
    np.testing.assert_allclose(dsnt_extract(Heatmap3D(Volume3D(p), True)).coords, ref, atol=1e-6)


def test_dirac_dsnt_equals_grid(rng):
    shape = (7, 6, 5)
    for _ in range(30):
        i = [int(rng.integers(n)) for n in shape]
        np.testing.assert_allclose(dsnt_extract(dirac(shape, i)).coords, voxel_to_normalized(i, shape), atol=1e-6)
