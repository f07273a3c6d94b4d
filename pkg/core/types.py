import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

from core.errors import InputError
from core.geometry import BoundingBox


def _check_unit_interval(name: str, value: float) -> None:
    if value is None or isinstance(value, bool) or math.isnan(value) or not 0.0 <= value <= 1.0:
        raise InputError(f"{name} must be in [0, 1], got {value!r}")


@dataclass(frozen=True, slots=True)
class Detection:
    box: BoundingBox
    score: float
    density: Optional[float] = None
    source_index: int = 0

    def __post_init__(self):
        _check_unit_interval("score", self.score)
        if self.density is not None:
            _check_unit_interval("density", self.density)

    def with_score(self, score: float) -> "Detection":
        return replace(self, score=score)

    def with_density(self, density: Optional[float]) -> "Detection":
        return replace(self, density=density)


@dataclass(frozen=True, slots=True)
class GroundTruthObject:
    box: BoundingBox
    ignore: bool = False
    density: float = 0.0

    def __post_init__(self):
        _check_unit_interval("density", self.density)

    @property
    def height(self) -> float:
        return self.box.y2 - self.box.y1


@dataclass(frozen=True)
class ImageAnnotation:
    """One annotated image: persons and ignore regions share the object list."""

    image_id: str
    width: float
    height: float
    objects: Tuple[GroundTruthObject, ...] = field(default_factory=tuple)

    @property
    def persons(self) -> List[GroundTruthObject]:
        return [o for o in self.objects if not o.ignore]

    @property
    def ignore_regions(self) -> List[BoundingBox]:
        return [o.box for o in self.objects if o.ignore]
