from __future__ import annotations

from dataclasses import dataclass, replace

from .config import PARTS


@dataclass(frozen=True)
class PartBox:
    """Axis-aligned part box in pixels; min edges inclusive, max edges exclusive."""

    part: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    calibrated: bool = False

    def __post_init__(self) -> None:
        if self.part not in PARTS:
            raise ValueError(f"unknown part {self.part!r}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {self.coords}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def center_y(self) -> float:
        return 0.5 * (self.y_min + self.y_max)

    def within(self, height: int, width: int) -> bool:
        return 0 <= self.x_min and self.x_max <= width and 0 <= self.y_min and self.y_max <= height

    def with_flag(self, calibrated: bool) -> "PartBox":
        return replace(self, calibrated=calibrated)

    def same_region(self, other: "PartBox") -> bool:
        return self.part == other.part and self.coords == other.coords

    def to_list(self) -> list[float]:
        return [_num(v) for v in self.coords]

    @classmethod
    def from_list(cls, part: str, coords, calibrated: bool = False) -> "PartBox":
        x0, y0, x1, y1 = (float(v) for v in coords)
        return cls(part, x0, y0, x1, y1, calibrated)


def _num(v: float) -> float | int:
    return int(v) if float(v).is_integer() else float(v)
