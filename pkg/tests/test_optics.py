import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from overlapscope.errors import InvalidArgument, InvalidDesign
from overlapscope.optics import (
    LensArrayDesign,
    SensorModel,
    image_fov_diameter,
    magnification,
    parse_design_document,
    snr_scale,
    sub_image_dynamic_range,
    validate_design,
)

TABLE1 = LensArrayDesign(n=7, d_o=1.2, d_i=30.0, w=3.7, a_o=0.84, na=0.25, d_x=2.0, array_width=11.1)
IMX477 = SensorModel(n_bit=8, v=10_000, pixel_size=1.55, width_mm=6.287, pixel_count=12.3)


@pytest.mark.parametrize(
    "d_i,d_o,expected", [(30.0, 1.2, 25.0), (4.0, 4.0, 1.0), (60.0, 1.2, 50.0)]
)
def test_magnification(d_i, d_o, expected):
    d = LensArrayDesign(d_i=d_i, d_o=d_o)
    assert magnification(d) == pytest.approx(expected, rel=1e-12)


def test_nonpositive_object_distance_rejected():
    with pytest.raises(InvalidDesign):
        LensArrayDesign(d_o=0.0)


@pytest.mark.parametrize(
    "d_i,d_o,a_o,expected",
    [(30.0, 1.2, 0.84, 21.0), (1.2, 1.2, 0.84, 0.84), (30.0, 1.2, 0.5, 12.5)],
)
def test_image_fov_diameter(d_i, d_o, a_o, expected):
    assert image_fov_diameter(LensArrayDesign(d_i=d_i, d_o=d_o, a_o=a_o)) == pytest.approx(expected)


def test_sub_image_dynamic_range():
    assert sub_image_dynamic_range(SensorModel(n_bit=8), 7) == pytest.approx(36.5714285714, rel=1e-10)
    assert sub_image_dynamic_range(SensorModel(n_bit=8), 1) == 256
    assert sub_image_dynamic_range(SensorModel(n_bit=12), 4) == 1024
    with pytest.raises(InvalidArgument):
        sub_image_dynamic_range(SensorModel(), 0)


def test_snr_scale_values():
    assert snr_scale(1) == 1.0
    assert snr_scale(4) == 0.5
    assert snr_scale(7) == pytest.approx(0.3779644730, rel=1e-9)
    with pytest.raises(InvalidArgument):
        snr_scale(0)


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100))
def test_magnification_homogeneous(d_i, d_o, c):
    a = magnification(LensArrayDesign(d_i=d_i, d_o=d_o))
    b = magnification(LensArrayDesign(d_i=c * d_i, d_o=c * d_o))
    assert b == pytest.approx(a, rel=1e-12)


@given(st.sampled_from([8, 10, 12, 16]), st.integers(1, 1000))
def test_dynamic_range_times_n(n_bit, n):
    assert sub_image_dynamic_range(SensorModel(n_bit=n_bit), n) * n == pytest.approx(2**n_bit, rel=1e-14)


@given(st.integers(1, 10_000))
def test_snr_scale_properties(n):
    assert snr_scale(n) ** 2 * n == pytest.approx(1.0, rel=1e-12)
    assert snr_scale(n + 1) < snr_scale(n)


def test_table1_design_is_feasible():
    report = validate_design(TABLE1, IMX477)
    assert report.violations == []
    assert report.magnification == pytest.approx(25.0)
    assert report.a_i == pytest.approx(21.0)
    assert report.sub_dynamic_range == pytest.approx(256 / 7)


def test_overlapping_object_fovs_reported():
    d = LensArrayDesign(a_o=4.0, w=3.7)
    report = validate_design(d, IMX477)
    assert any(v.startswith("object FOVs overlap") for v in report.violations)


def test_under_covered_sensor_reported():
    # a_i = 25 * 0.2 = 5 mm < 6.287 mm
    d = LensArrayDesign(a_o=0.2)
    report = validate_design(d, IMX477)
    assert any(v.startswith("sub-image under-covers sensor") for v in report.violations)


def test_array_width_and_resolution_checks():
    r = validate_design(LensArrayDesign(array_width=20.0), IMX477)
    assert any("hexagonal" in v for v in r.violations)
    r = validate_design(LensArrayDesign(d_x=10.0), IMX477)
    assert any("resolution" in v for v in r.violations)
    # the hexagonal rule only applies to seven lenses
    assert validate_design(LensArrayDesign(n=4, array_width=20.0), IMX477).violations == []


def test_invalid_sensor():
    with pytest.raises(InvalidArgument):
        SensorModel(n_bit=9)
    with pytest.raises(InvalidArgument):
        SensorModel(v=0)


def test_parse_design_document_flat_and_nested():
    flat = {"n": 7, "d_o": 1.2, "d_i": 30, "w": 3.7, "a_o": 0.84, "na": 0.25, "d_x": 2, "array_width": 11.1,
            "n_bit": 8, "v": 10000, "pixel_size": 1.55, "width_mm": 6.287, "pixel_count": 12.3}
    d1, s1 = parse_design_document(flat)
    d2, s2 = parse_design_document({"design": {k: flat[k] for k in ("n", "d_o", "d_i", "w", "a_o", "na", "d_x", "array_width")},
                                     "sensor": {k: flat[k] for k in ("n_bit", "v", "pixel_size", "width_mm", "pixel_count")}})
    assert d1 == d2 == TABLE1
    assert s1 == s2
    with pytest.raises(InvalidArgument):
        parse_design_document({"bogus": 1})
