"""
File formats: newline-delimited JSON records, one image per line.

  annotations:  {"image_id", "width", "height", "objects": [{"box": [x1,y1,x2,y2], "ignore": 0|1}]}
  detections:   {"image_id", "detections": [{"box": [...], "score": s, "density": d (optional)}]}

Floats are written with 6 significant digits and sorted keys, so serialisation
is deterministic. Readers validate every record and report the line and field
of the first problem; unknown fields are ignored with a warning.
"""
import contextlib
import json
import logging
import math
import sys
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Set, TextIO, Tuple, Type

import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator

from core.config import SIGNIFICANT_DIGITS, quantize
from core.errors import DataFormatError
from core.geometry import BoundingBox
from core.types import Detection, GroundTruthObject, ImageAnnotation
from services.density_service import with_gt_densities

logger = logging.getLogger(__name__)

STDOUT = "-"
CSV_FLOAT_FORMAT = f"%.{SIGNIFICANT_DIGITS}g"


def _validate_box(value: List[float]) -> List[float]:
    if len(value) != 4:
        raise ValueError(f"box needs 4 coordinates, got {len(value)}")
    if not all(math.isfinite(v) for v in value):
        raise ValueError("box coordinates must be finite")
    x1, y1, x2, y2 = value
    if not (x2 > x1 and y2 > y1):
        raise ValueError("box must have positive width and height")
    return value


class AnnotationObjectRecord(BaseModel):
    box: List[float]
    ignore: int = 0

    @field_validator("box")
    @classmethod
    def _check_box(cls, value: List[float]) -> List[float]:
        return _validate_box(value)

    @field_validator("ignore")
    @classmethod
    def _check_ignore(cls, value: int) -> int:
        if value not in (0, 1):
            raise ValueError("ignore must be 0 or 1")
        return value


class AnnotationRecord(BaseModel):
    image_id: str
    width: float = Field(gt=0)
    height: float = Field(gt=0)
    objects: List[AnnotationObjectRecord] = Field(default_factory=list)


class DetectionEntryRecord(BaseModel):
    box: List[float]
    score: float = Field(ge=0.0, le=1.0)
    density: Optional[float] = Field(None, ge=0.0, le=1.0)

    @field_validator("box")
    @classmethod
    def _check_box(cls, value: List[float]) -> List[float]:
        return _validate_box(value)


class DetectionRecord(BaseModel):
    image_id: str
    detections: List[DetectionEntryRecord] = Field(default_factory=list)


NESTED_LISTS: Dict[Type[BaseModel], Tuple[str, Type[BaseModel]]] = {
    AnnotationRecord: ("objects", AnnotationObjectRecord),
    DetectionRecord: ("detections", DetectionEntryRecord),
}


def _warn_unknown_fields(raw: Dict[str, Any], model: Type[BaseModel], path: str, line: int, seen: Set[str]) -> None:
    unknown = set(raw) - set(model.model_fields)
    nested = NESTED_LISTS.get(model)
    if nested and isinstance(raw.get(nested[0]), list):
        name, child = nested
        for entry in raw[name]:
            if isinstance(entry, dict):
                unknown |= {f"{name}.{k}" for k in set(entry) - set(child.model_fields)}
    for key in sorted(unknown - seen):
        logger.warning(f"[IO] {path}:{line}: ignoring unknown field '{key}'")
        seen.add(key)


def _iter_records(path: str, model: Type[BaseModel]) -> Iterator[Tuple[int, BaseModel]]:
    seen_unknown: Set[str] = set()
    seen_ids: Set[str] = set()
    with open(path, "rb") as handle:
        for line_no, chunk in enumerate(handle, start=1):
            try:
                text = chunk.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DataFormatError(path, line_no, "<record>", f"invalid UTF-8 at byte {exc.start}") from exc
            if not text.strip():
                continue
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DataFormatError(path, line_no, "<record>", f"invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise DataFormatError(path, line_no, "<record>", "record must be a JSON object")
            try:
                record = model.model_validate(raw)
            except ValidationError as exc:
                first = exc.errors()[0]
                field = ".".join(str(part) for part in first["loc"]) or "<record>"
                raise DataFormatError(path, line_no, field, first["msg"]) from exc
            if record.image_id in seen_ids:
                raise DataFormatError(path, line_no, "image_id", f"duplicate image id '{record.image_id}'")
            seen_ids.add(record.image_id)
            _warn_unknown_fields(raw, model, path, line_no, seen_unknown)
            yield line_no, record


def read_annotations(path: str) -> Dict[str, ImageAnnotation]:
    """Per-image ground truth, with densities computed on load."""
    images: Dict[str, ImageAnnotation] = {}
    for _, record in _iter_records(path, AnnotationRecord):
        objects = [
            GroundTruthObject(box=BoundingBox.from_sequence(o.box), ignore=bool(o.ignore))
            for o in record.objects
        ]
        images[record.image_id] = ImageAnnotation(
            image_id=record.image_id,
            width=record.width,
            height=record.height,
            objects=tuple(with_gt_densities(objects)),
        )
    logger.info(f"[IO] Read {len(images)} annotated images from {path}")
    return images


def read_detections(path: str) -> Dict[str, List[Detection]]:
    """Per-image detections; source_index is the position inside the record."""
    out: Dict[str, List[Detection]] = {}
    for _, record in _iter_records(path, DetectionRecord):
        out[record.image_id] = [
            Detection(
                box=BoundingBox.from_sequence(d.box),
                score=d.score,
                density=d.density,
                source_index=i,
            )
            for i, d in enumerate(record.detections)
        ]
    logger.info(f"[IO] Read detections for {len(out)} images from {path}")
    return out


def _quantized(obj: Any) -> Any:
    if isinstance(obj, float):
        return quantize(obj) if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _quantized(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_quantized(v) for v in obj]
    return obj


def _dumps_line(record: Mapping[str, Any]) -> str:
    return json.dumps(_quantized(record), sort_keys=True, separators=(",", ":"))


@contextlib.contextmanager
def _open_output(path: str) -> Iterator[TextIO]:
    if path == STDOUT:
        yield sys.stdout
        sys.stdout.flush()
        return
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        yield handle


def _write_lines(path: str, records: Sequence[Mapping[str, Any]]) -> None:
    with _open_output(path) as handle:
        for record in records:
            handle.write(_dumps_line(record))
            handle.write("\n")


def _object_record(obj: GroundTruthObject, with_density: bool = False) -> Dict[str, Any]:
    record: Dict[str, Any] = {"box": obj.box.to_list(), "ignore": int(obj.ignore)}
    if with_density:
        record["density"] = obj.density
        record["height"] = obj.height
    return record


def write_annotations(path: str, annotations: Mapping[str, ImageAnnotation]) -> None:
    _write_lines(path, [
        {
            "image_id": image_id,
            "width": annotations[image_id].width,
            "height": annotations[image_id].height,
            "objects": [_object_record(o) for o in annotations[image_id].objects],
        }
        for image_id in sorted(annotations)
    ])


def write_density_dump(path: str, annotations: Mapping[str, ImageAnnotation]) -> None:
    _write_lines(path, [
        {
            "image_id": image_id,
            "width": annotations[image_id].width,
            "height": annotations[image_id].height,
            "objects": [_object_record(o, with_density=True) for o in annotations[image_id].objects],
        }
        for image_id in sorted(annotations)
    ])


def _detection_entry(det: Detection) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"box": det.box.to_list(), "score": det.score}
    if det.density is not None:
        entry["density"] = det.density
    return entry


def write_detections(path: str, detections: Mapping[str, Sequence[Detection]]) -> None:
    _write_lines(path, [
        {"image_id": image_id, "detections": [_detection_entry(d) for d in detections[image_id]]}
        for image_id in sorted(detections)
    ])


def write_json(path: str, document: Mapping[str, Any]) -> None:
    with _open_output(path) as handle:
        handle.write(json.dumps(_quantized(document), sort_keys=True, indent=2))
        handle.write("\n")


def write_report(path: str, report: Mapping[str, Any]) -> None:
    write_json(path, report)


def write_table_csv(path: str, table: pd.DataFrame) -> None:
    with _open_output(path) as handle:
        table.to_csv(handle, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def write_curve_csv(path: str, curve: Sequence[Tuple[float, float]]) -> None:
    write_table_csv(path, pd.DataFrame(list(curve), columns=["fppi", "miss_rate"]))
