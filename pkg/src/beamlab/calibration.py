"""Pixel-to-millimeter conversion from a reference object of known size."""

from __future__ import annotations

from dataclasses import dataclass

from .geometry import Polygon, minimum_width


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationScale:
    """Isotropic linear scale.

    Attributes:
        mm_per_pixel: Millimeters per image pixel.
        reference_mm: Known physical size of the reference object.
        reference_px: Its measured size in pixels.
        reference: Free-text description of the object.
    """

    mm_per_pixel: float
    reference_mm: float
    reference_px: float
    reference: str = "probe"

    def __post_init__(self):
        if not self.mm_per_pixel > 0:
            raise CalibrationError(f"mm_per_pixel must be positive, got {self.mm_per_pixel}")


def derive_scale(reference_mm: float, reference_px: float, reference: str = "probe") -> CalibrationScale:
    if not (reference_mm > 0 and reference_px > 0):
        raise CalibrationError(
            f"reference sizes must be positive (mm={reference_mm}, px={reference_px})")
    return CalibrationScale(reference_mm / reference_px, reference_mm, reference_px, reference)


def to_mm(distance_px: float, scale: CalibrationScale) -> float:
    if distance_px < 0:
        raise CalibrationError(f"negative distance {distance_px}")
    return distance_px * scale.mm_per_pixel


def probe_reference_px(probe_mask: Polygon) -> float:
    """Probe width in pixels: minimum caliper width of its mask polygon."""
    return minimum_width(probe_mask)
