import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ouro import sceneforge as sf
from ouro.core import (
    CHANNELS, PROFILE_MASKS, Caption, ChannelMask, Colorspace, DatasetRecord, ImageTensor, IntrinsicSet, Profile,
    TaskToken, ValidationError, decode_normal, encode_normal, list_records, read_record, validate_record,
    write_record,
)

unit_vectors = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: np.asarray(v) / np.linalg.norm(v))


@settings(max_examples=200, deadline=None)
@given(unit_vectors)
def test_normal_round_trip(n):
    back = decode_normal(encode_normal(n[None, None]))[0, 0]
    assert np.max(np.abs(back - n)) < 1e-6


def test_encode_normal_values():
    n = np.array([[[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]]])
    np.testing.assert_allclose(encode_normal(n), [[[0.5, 0.5, 1.0], [0.0, 0.5, 0.5]]])


def test_encode_rejects_non_unit_and_names_pixel():
    n = np.zeros((2, 3, 3))
    n[..., 2] = 1.0
    n[1, 2] = (0.0, 0.0, 2.0)
    with pytest.raises(ValidationError, match=r"\(1, 2\)"):
        encode_normal(n)


def test_decode_zero_vector_maps_to_plus_z():
    np.testing.assert_array_equal(decode_normal(np.full((1, 1, 3), 0.5)), [[[0.0, 0.0, 1.0]]])


def test_image_tensor_validation():
    ImageTensor(np.zeros((8, 8, 3)))
    with pytest.raises(ValidationError, match="smaller than 8"):
        ImageTensor(np.zeros((4, 8, 3)))
    with pytest.raises(ValidationError, match="channel count"):
        ImageTensor(np.zeros((8, 8, 2)))
    with pytest.raises(ValidationError, match="non-finite"):
        ImageTensor(np.full((8, 8, 3), np.inf))
    with pytest.raises(ValidationError, match="outside"):
        ImageTensor(np.full((8, 8, 3), 1.5), Colorspace.UNIT)
    assert ImageTensor(np.zeros((8, 8))).shape == (8, 8, 1)


def test_channel_mask():
    m = ChannelMask.of(["a", "n", "E"])
    assert m.present() == ["normal", "albedo", "irradiance"]
    assert "roughness" not in m and len(m) == 3
    assert ChannelMask.of(m.to_json()) == m
    assert PROFILE_MASKS[Profile.CITY].present() == ["normal", "albedo", "roughness", "metallicity"]
    assert len(PROFILE_MASKS[Profile.WILD]) == 0
    with pytest.raises(ValueError):
        ChannelMask.of(["x"])


def test_caption_bounds():
    assert Caption("a").text == "a"
    with pytest.raises(ValidationError):
        Caption("")
    with pytest.raises(ValidationError):
        Caption("x" * 257)


def test_task_tokens():
    assert [t.index for t in TaskToken] == list(range(5))
    assert TaskToken.parse("E") is TaskToken.IRRADIANCE
    with pytest.raises(ValidationError):
        TaskToken.parse("depth")


def test_masked_zeroes_absent_channels():
    rec = sf.render_gbuffer(sf.sample_scene(3), 16).intrinsics
    sub = rec.masked(ChannelMask.of("anE"))
    assert not sub.roughness.any() and not sub.metallicity.any()
    np.testing.assert_array_equal(sub.albedo, rec.albedo)


def _record(profile=Profile.INDOOR):
    return sf.make_record("rec", 11, profile, resolution=16)


def test_generated_records_validate():
    for p in Profile:
        assert validate_record(_record(p)) == []


def test_validate_lists_every_violation():
    r = _record()
    r.intrinsics.normal[0, 0] = (0.0, 0.0, 3.0)
    r.intrinsics.roughness[:] = 0.5  # absent in indoor-like
    r.intrinsics.albedo[1, 1, 0] = 2.0
    problems = validate_record(r)
    assert any("unit-norm violation at pixel (0, 0)" in p for p in problems)
    assert any(p.startswith("roughness: absent") for p in problems)
    assert any(p.startswith("albedo: values outside") for p in problems)


def test_validate_profile_mask_mismatch():
    r = _record()
    r = DatasetRecord(r.id, r.rgb, r.intrinsics.masked(ChannelMask.full()), r.caption, Profile.INDOOR)
    assert any("profile/mask mismatch" in p for p in validate_record(r))


def test_record_io_round_trip(tmp_path):
    r = _record(Profile.CITY)
    d = write_record(tmp_path / "train" / r.id, r, previews=True)
    back = read_record(d)
    assert back.id == r.id and back.caption == r.caption and back.profile is Profile.CITY
    assert back.intrinsics.mask == r.intrinsics.mask
    np.testing.assert_array_equal(back.rgb.data, r.rgb.data)
    for c in CHANNELS:
        np.testing.assert_allclose(back.intrinsics.channel(c), r.intrinsics.channel(c), atol=1e-6)
    meta = json.loads((d / "meta.json").read_text())
    assert meta["mask"] == ["normal", "albedo", "roughness", "metallicity"]
    assert (d / "rgb.png").exists() and (d / "albedo.png").exists() and not (d / "irradiance.png").exists()
    assert list_records(tmp_path, "train") == [d]


def test_intrinsic_zeros():
    x = IntrinsicSet.zeros(8, 10)
    assert x.hw == (8, 10) and x.roughness.shape == (8, 10, 1) and len(x.mask) == 0
