import numpy as np
import pytest
from hypothesis import given, strategies as st

from antloc.volume import (Landmark, RoiBox, Volume3D, convert_landmark, crop_roi, flip_landmark_x, flip_x,
                           flipped_box, normalize_intensity, normalized_to_voxel, parent_to_roi_voxel,
                           resample_isotropic, roi_to_parent_voxel, trilinear_sample, voxel_to_normalized,
                           voxel_to_world, world_to_voxel)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2)), spacing_mm=(1, 0, 1))
    v = Volume3D(np.zeros((2, 3, 4)), (1, 2, 3), (4, 5, 6))
    assert v.shape == (2, 3, 4) and v.spacing_mm == (1.0, 2.0, 3.0)


def test_landmark_frame_checked():
    with pytest.raises(ValueError):
        Landmark("a", "pixels", (0, 0, 0))


def test_x_slowest_linear_index():
    data = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    x, y, z = 1, 2, 3
    assert data.reshape(-1)[x * 12 + y * 4 + z] == data[x, y, z]


def test_normalized_examples():
    np.testing.assert_allclose(voxel_to_normalized((0, 0, 0), (64, 64, 64)), (-1, -1, -1))
    np.testing.assert_allclose(voxel_to_normalized((31.5, 31.5, 31.5), (64, 64, 64)), (0, 0, 0), atol=1e-12)
    np.testing.assert_allclose(voxel_to_normalized((2, 1, 0), (3, 3, 3)), (1, 0, -1))
    with pytest.raises(ValueError):
        voxel_to_normalized((0, 0, 0), (1, 4, 4))


@given(st.tuples(*[st.integers(2, 80)] * 3), st.data())
def test_normalized_roundtrip(shape, data):
    idx = [data.draw(st.floats(0, n - 1)) for n in shape]
    back = normalized_to_voxel(voxel_to_normalized(idx, shape), shape)
    np.testing.assert_allclose(back, idx, atol=1e-6)
    assert np.all(np.abs(voxel_to_normalized(idx, shape)) <= 1 + 1e-12)


def test_world_roundtrip_and_convert(rng):
    v = Volume3D(np.zeros((10, 12, 14)), (0.5, 1.5, 2.0), (-3, 4, 7))
    i = rng.uniform(0, 9, size=3)
    np.testing.assert_allclose(world_to_voxel(voxel_to_world(i, v), v), i, atol=1e-12)
    lm = Landmark("t", "voxel", i)
    for frame in ("normalized", "world_mm"):
        there = convert_landmark(lm, v, frame)
        back = convert_landmark(there, v, "voxel")
        np.testing.assert_allclose(back.array(), i, atol=1e-6)


def test_trilinear_matches_formula(rng):
    data = rng.random((4, 5, 6))
    p = np.array([1.3, 2.7, 4.1])
    i0 = np.floor(p).astype(int)
    f = p - i0
    ref = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                ref += w * data[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    assert trilinear_sample(data, p[None])[0] == pytest.approx(ref, abs=1e-12)
    # exact at voxel centers; a full voxel outside the grid reads 0 in zero mode
    assert trilinear_sample(data, np.array([[3, 4, 5]]))[0] == pytest.approx(data[3, 4, 5])
    assert trilinear_sample(data, np.array([[-1.0, 0, 0]]))[0] == 0.0
    assert trilinear_sample(data, np.array([[-1.0, 0, 0]]), mode="clamp")[0] == pytest.approx(data[0, 0, 0])


def test_resample_constant():
    v = Volume3D(np.full((5, 6, 7), 0.7), (2.0, 0.5, 1.3))
    out = resample_isotropic(v, 1.0)
    assert out.shape == (10, 3, 9)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-12)


def test_resample_identity_at_native_spacing(rng):
    v = Volume3D(rng.random((5, 6, 7)), (1, 1, 1), (2, 3, 4))
    out = resample_isotropic(v, 1.0)
    assert out.shape == v.shape and out.origin_mm == v.origin_mm
    np.testing.assert_array_equal(out.data, v.data)


def test_resample_ramp_matches_oracle():
    ramp = np.broadcast_to(np.arange(8.0)[:, None, None], (8, 8, 8)).copy()
    v = Volume3D(ramp, (2.0, 1.0, 1.0))
    out = resample_isotropic(v, 1.0)
    assert out.shape == (16, 8, 8)
    # oracle: output voxel centers in world mm, mapped to input index, then the clamped ramp
    xw = out.origin_mm[0] + np.arange(16) * 1.0
    expect = np.clip(xw / 2.0, 0, 7)
    np.testing.assert_allclose(out.data[:, 3, 3], expect, atol=1e-5)
    # world extent preserved within one output voxel
    assert abs(16 * 1.0 - 8 * 2.0) <= 1.0


def test_resample_errors():
    with pytest.raises(ValueError):
        resample_isotropic(Volume3D(np.zeros((3, 3, 3))), 0.0)
    bad = np.zeros((3, 3, 3))
    bad[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        resample_isotropic(Volume3D(bad, (2, 2, 2)), 1.0)


def test_normalize_examples():
    v = Volume3D(np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1))
    np.testing.assert_allclose(normalize_intensity(v).data.ravel(), [0, 0.5, 1])
    u = Volume3D(np.array([0.0, 0.25, 1.0]).reshape(3, 1, 1))
    np.testing.assert_allclose(normalize_intensity(u).data, u.data)
    c = Volume3D(np.full((3, 1, 1), 5.0))
    np.testing.assert_array_equal(normalize_intensity(c).data, 0)
    with pytest.raises(ValueError):
        normalize_intensity(Volume3D(np.array([np.inf, 1, 2]).reshape(3, 1, 1)))


@given(st.integers(0, 2**31 - 1))
def test_normalize_idempotent(seed):
    data = np.random.default_rng(seed).normal(size=(4, 4, 4))
    once = normalize_intensity(Volume3D(data))
    twice = normalize_intensity(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-12)
    assert once.data.min() == 0 and once.data.max() == 1


def test_crop_identity(rng):
    v = Volume3D(rng.random((64, 64, 64)), (1, 1, 1), (5, 6, 7))
    roi, box = crop_roi(v, (32, 32, 32), (64, 64, 64))
    assert box.origin_voxel == (0, 0, 0)
    np.testing.assert_array_equal(roi.data, v.data)
    assert roi.origin_mm == v.origin_mm


def test_crop_corner_zero_padded():
    v = Volume3D(np.ones((10, 10, 10)))
    roi, box = crop_roi(v, (0, 0, 0), (4, 4, 4))
    assert roi.shape == (4, 4, 4) and box.origin_voxel == (-2, -2, -2)
    assert int(roi.data.sum()) == 8
    np.testing.assert_array_equal(roi.data[2:, 2:, 2:], 1)


def test_crop_floors_fractional_center():
    v = Volume3D(np.zeros((10, 10, 10)))
    _, box = crop_roi(v, (4.7, 5.2, 5.999), (4, 4, 4))
    assert box.origin_voxel == (2, 3, 3)


def test_crop_preserves_world(rng):
    v = Volume3D(rng.random((20, 20, 20)), (0.8, 1.1, 1.3), (1, 2, 3))
    roi, box = crop_roi(v, (9, 11, 7), (8, 8, 8))
    parent_idx = np.array([10.25, 12.5, 6.75])
    world = voxel_to_world(parent_idx, v)
    roi_idx = parent_to_roi_voxel(parent_idx, box)
    np.testing.assert_allclose(voxel_to_world(roi_idx, roi), world, atol=1e-9)
    np.testing.assert_allclose(roi_to_parent_voxel(roi_idx, box), parent_idx, atol=1e-12)


def test_flip_examples(rng):
    v = Volume3D(rng.random((6, 5, 4)))
    np.testing.assert_array_equal(flip_x(flip_x(v)).data, v.data)
    assert flip_landmark_x(Landmark("t", "voxel", (10, 3, 4)), 64).coords == (53.0, 3.0, 4.0)
    with pytest.raises(ValueError):
        flip_landmark_x(Landmark("t", "world_mm", (10, 3, 4)), 64)


def test_flip_argmax_commutes(rng):
    for _ in range(20):
        h = rng.random((8, 8, 8))
        a = np.array(np.unravel_index(np.argmax(h), h.shape), dtype=float)
        fa = np.array(np.unravel_index(np.argmax(flip_x(Volume3D(h)).data), h.shape), dtype=float)
        np.testing.assert_array_equal(fa, flip_landmark_x(Landmark("a", "voxel", a), 8).array())


def test_flipped_box_roundtrip(rng):
    box = flipped_box(RoiBox((3, -2, 5), (8, 8, 8)))
    p = rng.uniform(-2, 10, size=3)
    np.testing.assert_allclose(roi_to_parent_voxel(parent_to_roi_voxel(p, box), box), p, atol=1e-12)
    # roi x index 0 of a flipped box sits at the high-x end of the parent crop
    np.testing.assert_allclose(roi_to_parent_voxel([0, 0, 0], box), [3 + 7, -2, 5])


def test_roibox_size_validation():
    with pytest.raises(ValueError):
        RoiBox((0, 0, 0), (1, 4, 4))
