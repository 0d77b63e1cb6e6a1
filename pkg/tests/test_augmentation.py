import numpy as np
import pytest

from oracles import single_voxel_oracle
from saunet3d.augmentation import (
    AugmentationConfig,
    augment,
    bias_field,
    draw_params,
    motion_ghosting,
)

SHAPE = (24, 24, 4)


def _pair(seed=0, shape=SHAPE):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=shape).astype(np.float32) + 3
    mask = rng.choice([0, 1, 2], p=[0.8, 0.15, 0.05], size=shape).astype(np.uint8)
    return img, mask


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(rotation_max_deg=200)
    with pytest.raises(ValueError):
        AugmentationConfig(elastic_alpha=-1)
    with pytest.raises(ValueError):
        AugmentationConfig(enabled={"warp": True})
    with pytest.raises(ValueError):
        AugmentationConfig(ghost_axes=(2,))
    cfg = AugmentationConfig.only("flip", seed=4)
    assert AugmentationConfig.from_dict(cfg.to_dict()) == cfg


def test_noop_config_returns_inputs_exactly():
    img, mask = _pair()
    out_i, out_m = augment(img, mask, AugmentationConfig.none(), np.random.default_rng(0))
    assert out_i is img and out_m is mask


def test_shape_mismatch():
    with pytest.raises(ValueError):
        augment(np.zeros((4, 4, 2)), np.zeros((4, 4, 3)), AugmentationConfig())


@pytest.mark.parametrize("seed", range(100))
def test_double_flip_is_identity(seed):
    img, mask = _pair(seed)
    cfg = AugmentationConfig.only("flip")
    a_i, a_m = augment(img, mask, cfg, np.random.default_rng(seed))
    b_i, b_m = augment(a_i, a_m, cfg, np.random.default_rng(seed))
    np.testing.assert_array_equal(b_i, img)
    np.testing.assert_array_equal(b_m, mask)


@pytest.mark.parametrize("seed", range(100))
def test_mask_label_closure_and_determinism(seed):
    img, mask = _pair(seed)
    cfg = AugmentationConfig()
    a = augment(img, mask, cfg, np.random.default_rng(seed))
    b = augment(img, mask, cfg, np.random.default_rng(seed))
    assert set(np.unique(a[1])) <= {0, 1, 2}
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].dtype == np.float32 and np.isfinite(a[0]).all()


@pytest.mark.parametrize("seed", range(20))
def test_intensity_transforms_leave_mask_untouched(seed):
    img, mask = _pair(seed)
    cfg = AugmentationConfig.only("channel_shift", "bias_field", "ghosting")
    out_i, out_m = augment(img, mask, cfg, np.random.default_rng(seed))
    np.testing.assert_array_equal(out_m, mask)
    assert not np.array_equal(out_i, img)


@pytest.mark.parametrize("seed", range(100))
def test_single_voxel_geometric_pairing(seed):
    rng = np.random.default_rng(10_000 + seed)
    shape = (17, 17, 3)
    voxel = (int(rng.integers(3, 14)), int(rng.integers(3, 14)), int(rng.integers(0, 3)))
    mask = np.zeros(shape, np.uint8)
    mask[voxel] = 1
    img = mask.astype(np.float32)
    cfg = AugmentationConfig.only("flip", "transpose", "rotation", rotation_max_deg=30)
    p = draw_params(cfg, np.random.default_rng(seed))
    _, out = augment(img, mask, cfg, np.random.default_rng(seed))
    got = {tuple(int(v) for v in idx) for idx in zip(*np.nonzero(out))}
    assert got == single_voxel_oracle(shape, voxel, p, rotate=True)


def test_transpose_swaps_axes():
    img = np.zeros((6, 8, 2), np.float32)
    mask = np.zeros((6, 8, 2), np.uint8)
    cfg = AugmentationConfig.only("transpose")
    for seed in range(20):
        p = draw_params(cfg, np.random.default_rng(seed))
        out_i, _ = augment(img, mask, cfg, np.random.default_rng(seed))
        assert out_i.shape == ((8, 6, 2) if p["swap"] else (6, 8, 2))


def test_bias_field_only_on_constant_image():
    cfg = AugmentationConfig.only("bias_field", seed=0)
    img = np.ones(SHAPE, np.float32)
    mask = np.zeros(SHAPE, np.uint8)
    for seed in range(10):
        out, _ = augment(img, mask, cfg, np.random.default_rng(seed))
        p = draw_params(cfg, np.random.default_rng(seed))
        field = bias_field(SHAPE, cfg.bias_field_order, cfg.bias_field_strength,
                           np.random.default_rng(p["field_seed"]))
        np.testing.assert_allclose(out, field, rtol=1e-6)
        assert field.min() >= 1 - 0.3 and field.max() <= 1 + 0.3


def test_bias_field_is_smooth_and_positive():
    f = bias_field((16, 16, 8), 3, 0.3, np.random.default_rng(5))
    assert (f > 0).all()
    # neighbouring voxels differ by far less than the field's range
    assert np.abs(np.diff(f, axis=0)).max() < 0.1


def test_channel_shift_is_global_offset():
    img, mask = _pair(2)
    cfg = AugmentationConfig.only("channel_shift", channel_shift_max=0.1)
    out, _ = augment(img, mask, cfg, np.random.default_rng(9))
    p = draw_params(cfg, np.random.default_rng(9))
    delta = out - img
    np.testing.assert_allclose(delta, p["shift"] * img.std(), rtol=1e-4, atol=1e-5)
    assert abs(delta.flat[0]) <= 0.1 * img.std() + 1e-6


def test_motion_ghosting_attenuates_chosen_lines_only():
    img = np.random.default_rng(0).normal(size=(16, 16, 2)).astype(np.float32)
    out = motion_ghosting(img, axis=0, k=3, intensity=0.15)
    before = np.fft.fftn(img, axes=(0, 1))
    after = np.fft.fftn(out, axes=(0, 1))
    for line in range(16):
        freq = line if line < 8 else line - 16
        ratio = np.abs(after[line]).sum() / np.abs(before[line]).sum()
        expected = 0.85 if (freq % 3 == 0 and freq != 0) else 1.0
        assert ratio == pytest.approx(expected, rel=1e-4)


def test_elastic_changes_image_but_not_label_set():
    img, mask = _pair(4)
    cfg = AugmentationConfig.only("elastic", elastic_alpha=30, elastic_sigma=3)
    out_i, out_m = augment(img, mask, cfg, np.random.default_rng(1))
    assert not np.array_equal(out_i, img)
    assert set(np.unique(out_m)) <= {0, 1, 2}
    # z is never resampled: each slice maps through the same in-plane field
    assert out_i.shape == img.shape


def test_geometric_transforms_never_mix_slices():
    img = np.zeros((20, 20, 3), np.float32)
    img[:, :, 1] = 1.0
    mask = (img > 0).astype(np.uint8)
    out_i, out_m = augment(img, mask, AugmentationConfig.only("rotation", "elastic", "flip", "transpose"),
                           np.random.default_rng(3))
    assert not out_i[:, :, 0].any() and not out_i[:, :, 2].any()
    assert not out_m[:, :, 0].any() and not out_m[:, :, 2].any()
