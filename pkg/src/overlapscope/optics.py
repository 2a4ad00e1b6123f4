"""Design arithmetic and feasibility checks for an n-lens overlapped microscope.

Lengths are in millimetres unless a field name says otherwise (``d_x`` and
``pixel_size`` are micrometres).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidArgument, InvalidDesign

DEFAULT_WAVELENGTH_UM = 0.55
SUPPORTED_BIT_DEPTHS = (8, 10, 12, 16)


@dataclass(frozen=True)
class LensArrayDesign:
    n: int = 7
    d_o: float = 1.2
    d_i: float = 30.0
    w: float = 3.7
    a_o: float = 0.84
    na: float = 0.25
    d_x: float = 2.0  # um
    array_width: float = 11.1

    def __post_init__(self):
        if self.n < 1:
            raise InvalidDesign(f"lens count must be >= 1, got {self.n}")
        for name in ("d_o", "d_i", "w", "a_o", "d_x", "array_width"):
            if not getattr(self, name) > 0:
                raise InvalidDesign(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.na < 1:
            raise InvalidDesign(f"na must lie in (0, 1), got {self.na}")


@dataclass(frozen=True)
class SensorModel:
    n_bit: int = 8
    v: float = 10_000.0  # well depth, photoelectrons
    pixel_size: float = 1.55  # um
    width_mm: float = 6.287
    pixel_count: float = 12.3  # megapixels

    def __post_init__(self):
        if self.n_bit not in SUPPORTED_BIT_DEPTHS:
            raise InvalidArgument(f"n_bit must be one of {SUPPORTED_BIT_DEPTHS}, got {self.n_bit}")
        if not self.v > 0:
            raise InvalidArgument(f"well depth v must be positive, got {self.v}")

    @property
    def total_dynamic_range(self) -> int:
        return 2**self.n_bit

    @property
    def max_value(self) -> int:
        return 2**self.n_bit - 1


@dataclass
class DesignReport:
    magnification: float
    a_i: float
    sub_dynamic_range: float
    snr_scale: float
    fov_gain: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return asdict(self)


def magnification(design: LensArrayDesign) -> float:
    if not design.d_o > 0:
        raise InvalidDesign("object distance must be positive")
    return design.d_i / design.d_o


def image_fov_diameter(design: LensArrayDesign) -> float:
    return magnification(design) * design.a_o


def sub_image_dynamic_range(sensor: SensorModel, n: int) -> float:
    """Grayscale levels left for each of ``n`` superimposed sub-images."""
    if n < 1:
        raise InvalidArgument(f"overlap number must be >= 1, got {n}")
    return sensor.total_dynamic_range / n


def snr_scale(n: int) -> float:
    if n < 1:
        raise InvalidArgument(f"overlap number must be >= 1, got {n}")
    return 1.0 / math.sqrt(n)


def validate_design(
    design: LensArrayDesign,
    sensor: SensorModel,
    wavelength_um: float = DEFAULT_WAVELENGTH_UM,
    hex_width_rtol: float = 0.05,
) -> DesignReport:
    """Run every feasibility check and collect failures instead of raising."""
    m = magnification(design)
    a_i = m * design.a_o
    violations = []
    if not design.a_o < design.w:
        violations.append(
            f"object FOVs overlap: a_o={design.a_o} mm >= w={design.w} mm"
        )
    if a_i < sensor.width_mm:
        violations.append(
            f"sub-image under-covers sensor: a_i={a_i:.4g} mm < s={sensor.width_mm} mm"
        )
    if design.n == 7:
        expected = 3 * design.w
        if abs(design.array_width - expected) > hex_width_rtol * expected:
            violations.append(
                f"hexagonal array width mismatch: array_width={design.array_width} mm, 3w={expected:.4g} mm"
            )
    d_x_est = wavelength_um / design.na
    ratio = d_x_est / design.d_x
    if not 0.5 <= ratio <= 2.0:
        violations.append(
            f"resolution inconsistent with NA: lambda/NA={d_x_est:.4g} um vs d_x={design.d_x} um"
        )
    return DesignReport(
        magnification=m,
        a_i=a_i,
        sub_dynamic_range=sub_image_dynamic_range(sensor, design.n),
        snr_scale=snr_scale(design.n),
        fov_gain=float(design.n),
        violations=violations,
    )


def _pick(cls, mapping):
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in mapping.items() if k in names}


def parse_design_document(doc: dict) -> tuple[LensArrayDesign, SensorModel]:
    """Accept either ``{"design": {...}, "sensor": {...}}`` or one flat mapping."""
    if not isinstance(doc, dict):
        raise InvalidArgument("design document must be a JSON object")
    if "design" in doc or "sensor" in doc:
        design_part = doc.get("design", {})
        sensor_part = doc.get("sensor", {})
    else:
        design_part = sensor_part = doc
    known = {f.name for f in fields(LensArrayDesign)} | {f.name for f in fields(SensorModel)}
    flat = {**design_part, **sensor_part} if design_part is not sensor_part else dict(doc)
    unknown = sorted(set(flat) - known)
    if unknown:
        raise InvalidArgument(f"unknown design keys: {', '.join(unknown)}")
    return (
        LensArrayDesign(**_pick(LensArrayDesign, design_part)),
        SensorModel(**_pick(SensorModel, sensor_part)),
    )


def load_design(path) -> tuple[LensArrayDesign, SensorModel]:
    with open(Path(path)) as fh:
        return parse_design_document(json.load(fh))
