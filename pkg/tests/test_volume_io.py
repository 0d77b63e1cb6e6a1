import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from saunet3d.volume_io import (
    Case,
    IllegalLabelError,
    LabelMask,
    Volume,
    VolumeIOError,
    load_case,
    load_dataset,
    load_mask,
    load_volume,
    save_case,
    save_mask,
    save_volume,
    write_array,
)


def _write_raw(path, arr, spacing, dtype):
    path.write_bytes(np.ascontiguousarray(arr).astype("<f4" if dtype == "f32" else "u1").tobytes())
    path.with_suffix(".json").write_text(json.dumps({"shape": list(arr.shape), "spacing": spacing, "dtype": dtype}))


def test_raw_load_passes_metadata(tmp_path):
    arr = np.arange(32, dtype=np.float32).reshape(4, 4, 2)
    _write_raw(tmp_path / "img.raw", arr, [1, 1, 3], "f32")
    case = load_case(tmp_path / "img.raw", scanner="phantom")
    assert case.image.original_shape == (4, 4, 2)
    assert case.image.spacing == (1.0, 1.0, 3.0)
    np.testing.assert_array_equal(case.image.data, arr)


def test_illegal_label_rejected(tmp_path):
    _write_raw(tmp_path / "img.raw", np.zeros((4, 4, 2)), [1, 1, 1], "f32")
    bad = np.zeros((4, 4, 2), np.uint8)
    bad[0, 0, 0] = 3
    _write_raw(tmp_path / "truth.raw", bad, [1, 1, 1], "u8")
    with pytest.raises(IllegalLabelError, match="illegal label"):
        load_case(tmp_path / "img.raw", tmp_path / "truth.raw")


def test_shape_mismatch_rejected(tmp_path):
    _write_raw(tmp_path / "img.raw", np.zeros((4, 4, 2)), [1, 1, 1], "f32")
    _write_raw(tmp_path / "truth.raw", np.zeros((4, 4, 3)), [1, 1, 1], "u8")
    with pytest.raises(VolumeIOError, match="shape mismatch"):
        load_case(tmp_path / "img.raw", tmp_path / "truth.raw")


def test_unreadable_inputs(tmp_path):
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "missing.raw")
    (tmp_path / "nosidecar.raw").write_bytes(b"\0" * 8)
    with pytest.raises(VolumeIOError, match="sidecar"):
        load_volume(tmp_path / "nosidecar.raw")
    _write_raw(tmp_path / "short.raw", np.zeros((2, 2, 2)), [1, 1, 1], "f32")
    (tmp_path / "short.raw").write_bytes(b"\0" * 4)
    with pytest.raises(VolumeIOError, match="bytes"):
        load_volume(tmp_path / "short.raw")
    (tmp_path / "junk.nii").write_bytes(b"not a nifti")
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "junk.nii")


def test_nifti_scanner_shape(tmp_path):
    data = np.random.default_rng(0).random((240, 240, 48)).astype(np.float32)
    write_array(data, tmp_path / "flair.nii.gz", spacing=(0.96, 0.96, 3.0))
    v = load_volume(tmp_path / "flair.nii.gz")
    assert v.shape == (240, 240, 48)
    np.testing.assert_array_equal(v.data, data)
    assert v.spacing == pytest.approx((0.96, 0.96, 3.0))


@pytest.mark.parametrize("ext", [".raw", ".nii", ".nii.gz"])
def test_mask_round_trip_preserves_labels(tmp_path, ext):
    m = np.zeros((4, 4, 2), np.uint8)
    m[0, 0, 0], m[1, 2, 1] = 1, 2
    save_mask(LabelMask(m), tmp_path / f"m{ext}")
    back = load_mask(tmp_path / f"m{ext}")
    np.testing.assert_array_equal(back.data, m)
    assert set(np.unique(back.data)) == {0, 1, 2}


def test_binary_prediction_readable_by_load_case(tmp_path):
    img = np.ones((4, 4, 2), np.float32)
    save_volume(Volume(img), tmp_path / "c_image.raw")
    pred = (np.arange(32).reshape(4, 4, 2) % 2).astype(np.uint8)
    save_mask(LabelMask(pred), tmp_path / "c_truth.raw")
    case = load_case(tmp_path / "c_image.raw", tmp_path / "c_truth.raw")
    np.testing.assert_array_equal(case.truth.data, pred)


def test_save_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(VolumeIOError):
        save_mask(LabelMask(np.zeros((2, 2, 2), np.uint8)), blocker / "sub" / "m.raw")


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4)),
           elements=st.floats(-1e6, 1e6, width=32)),
    st.tuples(*[st.floats(0.1, 5.0)] * 3),
)
def test_volume_round_trip_exact(tmp_path_factory, data, spacing):
    d = tmp_path_factory.mktemp("rt")
    save_volume(Volume(data, spacing), d / "v.raw")
    v = load_volume(d / "v.raw")
    np.testing.assert_array_equal(v.data, data)
    assert v.spacing == pytest.approx(spacing)
    assert v.original_shape == data.shape


def test_loading_does_not_normalize(tmp_path):
    data = np.full((3, 3, 3), 1234.5, np.float32)
    save_volume(Volume(data), tmp_path / "v.nii")
    np.testing.assert_array_equal(load_volume(tmp_path / "v.nii").data, data)


def test_volume_and_case_invariants():
    with pytest.raises(VolumeIOError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(VolumeIOError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(VolumeIOError):
        Case("x", "phantom", Volume(np.zeros((2, 2, 2))), LabelMask(np.zeros((2, 2, 3))))


def test_dataset_directory(tmp_path, two_phantoms):
    for c in two_phantoms:
        save_case(c, tmp_path)
    cases = load_dataset(tmp_path)
    assert [c.id for c in cases] == [c.id for c in two_phantoms]
    for a, b in zip(cases, two_phantoms):
        np.testing.assert_array_equal(a.image.data, b.image.data)
        np.testing.assert_array_equal(a.truth.data, b.truth.data)
    with pytest.raises(VolumeIOError, match="not found"):
        load_dataset(tmp_path / "nope")
