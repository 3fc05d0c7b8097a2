import pytest
from hypothesis import given
from hypothesis import strategies as st

from beamlab.calibration import CalibrationError, derive_scale, probe_reference_px, to_mm
from beamlab.geometry import Polygon

pos = st.floats(1e-3, 1e4, allow_nan=False)


def test_endpoint_scales():
    assert derive_scale(0.5, 10).mm_per_pixel == pytest.approx(0.05, abs=1e-15)
    assert derive_scale(2.6, 40).mm_per_pixel == pytest.approx(0.065, abs=1e-15)
    assert derive_scale(1, 1).mm_per_pixel == 1.0


def test_to_mm_examples():
    assert to_mm(13.44, derive_scale(0.5, 10)) == pytest.approx(0.672, abs=1e-12)
    assert to_mm(0, derive_scale(0.5, 10)) == 0.0
    assert to_mm(13.44, derive_scale(2.6, 40)) == pytest.approx(0.8736, abs=1e-12)


@pytest.mark.parametrize("mm, px", [(0, 10), (1, 0), (-1, 5), (1, -5)])
def test_invalid_reference(mm, px):
    with pytest.raises(CalibrationError):
        derive_scale(mm, px)


def test_negative_distance():
    with pytest.raises(CalibrationError):
        to_mm(-1, derive_scale(1, 1))


@given(pos, pos)
def test_roundtrip(mm, px):
    assert abs(to_mm(px, derive_scale(mm, px)) - mm) <= 1e-12 * max(1.0, mm)


@given(pos, pos, pos, pos)
def test_linearity(mm, px, a, b):
    s = derive_scale(mm, px)
    assert to_mm(a + b, s) == pytest.approx(to_mm(a, s) + to_mm(b, s), rel=1e-12)


def test_probe_width_from_mask():
    probe = Polygon(((0, 0), (120, 0), (120, 14), (0, 14)))
    px = probe_reference_px(probe)
    assert px == pytest.approx(14.0)
    assert derive_scale(0.7, px).mm_per_pixel == pytest.approx(0.05)
