import numpy as np
import pytest

from oracles import flood_fill_components
from saunet3d.phantom import PhantomConfig, expected_lesion_volume, generate, generate_dataset


def test_same_seed_same_case():
    a = generate(PhantomConfig(seed=11))
    b = generate(PhantomConfig(seed=11))
    np.testing.assert_array_equal(a.image.data, b.image.data)
    np.testing.assert_array_equal(a.truth.data, b.truth.data)
    assert a.meta == b.meta
    c = generate(PhantomConfig(seed=12))
    assert not np.array_equal(a.image.data, c.image.data)


def test_zero_lesions_gives_empty_truth():
    case = generate(PhantomConfig(n_lesions=(0, 0)))
    assert not case.truth.data.any()
    assert case.meta["lesions"] == []


def test_shape_spacing_and_labels():
    case = generate(PhantomConfig(shape=(48, 40, 12), spacing=(0.9, 0.9, 3.0), seed=3))
    assert case.image.shape == (48, 40, 12)
    assert case.image.spacing == (0.9, 0.9, 3.0)
    assert case.image.data.dtype == np.float32
    assert set(np.unique(case.truth.data)) <= {0, 1}
    hits = 0
    for seed in range(10):
        case = generate(PhantomConfig(include_label2=True, seed=seed))
        blob = [l for l in case.meta["lesions"] if l["label"] == 2]
        assert len(blob) == 1
        assert int((case.truth.data == 2).sum()) == blob[0]["voxels"]
        hits += blob[0]["voxels"] > 0
    assert hits > 0


@pytest.mark.parametrize("seed", range(10))
def test_components_equal_nonempty_stamps(seed):
    case = generate(PhantomConfig(seed=seed, include_label2=True))
    stamps = [l for l in case.meta["lesions"] if l["voxels"] > 0]
    _, n = flood_fill_components(case.truth.data > 0, 26)
    assert n == len(stamps)
    assert sum(l["voxels"] for l in stamps) == int((case.truth.data > 0).sum())


def test_lesion_contrast_relative_to_background():
    cfg = PhantomConfig(seed=4, n_lesions=(8, 8), lesion_radius_z=(0.6, 1.0))
    case = generate(cfg)
    img, truth = case.image.data, case.truth.data
    lesion = img[truth == 1]
    ring = img[(truth == 0) & (img != 0)]
    gap = (lesion.mean() - ring.mean()) / cfg.background_noise
    # lesions sit ~1.5 noise std above a slowly varying background
    assert 1.0 < gap < 2.0


def test_intensity_zero_outside_head():
    case = generate(PhantomConfig(seed=0))
    img = case.image.data
    assert img[0, 0].max() == 0 and img[-1, -1].max() == 0
    assert (img[32, 32] > 0).all()


def test_mean_stamp_volume_matches_expectation():
    cfg = PhantomConfig()
    voxels = []
    for case in generate_dataset(100, cfg, seed=1000):
        voxels.extend(l["voxels"] for l in case.meta["lesions"] if l["label"] == 1)
    expected = expected_lesion_volume(cfg)
    assert abs(np.mean(voxels) - expected) / expected < 0.2


def test_dataset_ids_and_seeds():
    cases = generate_dataset(3, PhantomConfig(shape=(32, 32, 8)), seed=7)
    assert [c.id for c in cases] == ["phantom_000", "phantom_001", "phantom_002"]
    np.testing.assert_array_equal(cases[1].image.data, generate(PhantomConfig(shape=(32, 32, 8), seed=8)).image.data)
    with pytest.raises(ValueError):
        generate_dataset(0)


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(shape=(8, 8, 2))
    with pytest.raises(ValueError):
        PhantomConfig(n_lesions=(5, 2))
    cfg = PhantomConfig(seed=9)
    assert PhantomConfig.from_dict(cfg.to_dict()) == cfg
