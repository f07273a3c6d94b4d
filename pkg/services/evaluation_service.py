"""
Evaluation Service: pedestrian-benchmark style matching and metrics.

Detections are matched score-first to the unmatched non-ignored ground truth
with the highest IoU. Unmatched detections falling mostly inside an ignore
region or ignored object are discarded, the rest count as false positives.
Metrics: log-average miss rate over FPPI in [1e-2, 1e0] (MR-2), all-points
interpolated AP, recall, and MR-2 per ground-truth density bin.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.config import DEFAULT_IOU_THRESH, IGNORE_IOA_THRESH, MIN_BIN_HEIGHT, MISS_RATE_FLOOR
from core.errors import DatasetMismatchError, InputError
from core.executor import map_ordered
from core.geometry import BoundingBox, boxes_to_array, ioa_matrix, iou_matrix
from core.types import Detection, GroundTruthObject, ImageAnnotation

logger = logging.getLogger(__name__)

MR_REFERENCE_FPPI = np.logspace(-2.0, 0.0, 9)
DENSITY_BIN_EDGES = (0.4, 0.5, 0.6, 0.7)
DENSITY_BIN_LABELS = ("<=0.4", "(0.4,0.5]", "(0.5,0.6]", "(0.6,0.7]", ">0.7")

Curve = List[Tuple[float, float]]


@dataclass(frozen=True)
class ImageEvalRecord:
    image_id: str
    labeled: List[Tuple[float, bool]] = field(default_factory=list)
    num_gt: int = 0
    gt_matched_flags: List[bool] = field(default_factory=list)
    gt_densities: List[float] = field(default_factory=list)
    gt_heights: List[float] = field(default_factory=list)


@dataclass
class EvalReport:
    mr2: float
    ap: float
    recall: float
    curve: Curve
    bin_mr2: Optional[List[Optional[float]]] = None
    bin_num_gt: Optional[List[int]] = None
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mr2": self.mr2,
            "ap": self.ap,
            "recall": self.recall,
            "curve": [[fppi, miss] for fppi, miss in self.curve],
            "bin_labels": list(DENSITY_BIN_LABELS) if self.bin_mr2 is not None else None,
            "bin_mr2": self.bin_mr2,
            "bin_num_gt": self.bin_num_gt,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    ignore_regions: Sequence[BoundingBox] = (),
    iou_thresh: float = DEFAULT_IOU_THRESH,
    image_id: str = "",
) -> ImageEvalRecord:
    persons = [g for g in gts if not g.ignore]
    ignore_boxes = [g.box for g in gts if g.ignore] + list(ignore_regions)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].source_index, i))

    det_boxes = boxes_to_array(d.box for d in dets)
    ious = iou_matrix(det_boxes, boxes_to_array(g.box for g in persons))
    ioas = ioa_matrix(det_boxes, boxes_to_array(ignore_boxes))

    matched = np.zeros(len(persons), dtype=bool)
    labeled: List[Tuple[float, bool]] = []
    for i in order:
        if persons:
            candidates = np.where(matched, -1.0, ious[i])
            j = int(candidates.argmax())
            if candidates[j] >= iou_thresh:
                matched[j] = True
                labeled.append((dets[i].score, True))
                continue
        if ignore_boxes and ioas[i].max() >= IGNORE_IOA_THRESH:
            continue
        labeled.append((dets[i].score, False))

    return ImageEvalRecord(
        image_id=image_id,
        labeled=labeled,
        num_gt=len(persons),
        gt_matched_flags=matched.tolist(),
        gt_densities=[g.density for g in persons],
        gt_heights=[g.height for g in persons],
    )


def _total_gt(records: Sequence[ImageEvalRecord]) -> int:
    if not records:
        raise InputError("Evaluation needs at least one image")
    total = sum(r.num_gt for r in records)
    if total == 0:
        raise InputError("Evaluation needs at least one non-ignored ground-truth object")
    return total


def _pooled(records: Sequence[ImageEvalRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """All labeled detections, score-descending, stable in record order."""
    scores = np.array([s for r in records for s, _ in r.labeled], dtype=np.float64)
    tps = np.array([tp for r in records for _, tp in r.labeled], dtype=bool)
    order = np.argsort(-scores, kind="stable")
    return scores[order], tps[order]


def fppi_missrate_curve(records: Sequence[ImageEvalRecord]) -> Curve:
    total_gt = _total_gt(records)
    scores, tps = _pooled(records)
    if scores.size == 0:
        return [(0.0, 1.0)]

    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(~tps)
    # one operating point per distinct score, taken after its whole tie group
    last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    fppi = fp_cum[last] / len(records)
    miss = np.minimum.accumulate(1.0 - tp_cum[last] / total_gt)
    return list(zip(fppi.tolist(), miss.tolist()))


def log_average_miss_rate(curve: Sequence[Tuple[float, float]]) -> float:
    if len(curve) == 0:
        raise InputError("Cannot compute MR-2 of an empty curve")
    arr = np.asarray(curve, dtype=np.float64).reshape(-1, 2)
    arr = arr[np.argsort(arr[:, 0], kind="stable")]
    fppi, miss = arr[:, 0], arr[:, 1]

    pos = np.searchsorted(fppi, MR_REFERENCE_FPPI, side="right") - 1
    samples = np.where(pos >= 0, miss[np.clip(pos, 0, None)], 1.0)
    return float(np.exp(np.mean(np.log(np.maximum(samples, MISS_RATE_FLOOR)))))


def average_precision(records: Sequence[ImageEvalRecord]) -> float:
    total_gt = _total_gt(records)
    _, tps = _pooled(records)
    if tps.size == 0:
        return 0.0

    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(~tps)
    rec = tp_cum / total_gt
    prec = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def recall(records: Sequence[ImageEvalRecord]) -> float:
    total_gt = _total_gt(records)
    return sum(sum(r.gt_matched_flags) for r in records) / total_gt


def bin_index(density: float) -> int:
    """0..4; edges are upper-inclusive: 0.4 -> 0, 0.45 -> 1, 0.7 -> 3."""
    return int(np.searchsorted(DENSITY_BIN_EDGES, density, side="left"))


def _restrict_to_bin(image: ImageAnnotation, b: int, min_height: float) -> ImageAnnotation:
    objects = tuple(
        o if o.ignore or (bin_index(o.density) == b and o.height >= min_height) else replace(o, ignore=True)
        for o in image.objects
    )
    return replace(image, objects=objects)


def _match_image(item: Tuple[ImageAnnotation, List[Detection]], iou_thresh: float) -> ImageEvalRecord:
    image, dets = item
    return match_detections(dets, image.objects, (), iou_thresh, image.image_id)


def check_image_ids(annotations: Mapping[str, ImageAnnotation], detections: Mapping[str, Sequence[Detection]]) -> None:
    unknown = sorted(set(detections) - set(annotations))
    if unknown:
        raise DatasetMismatchError(
            f"{len(unknown)} detection image ids are missing from the annotations",
            {"image_ids": unknown},
        )


def _records(
    annotations: Mapping[str, ImageAnnotation],
    detections: Mapping[str, Sequence[Detection]],
    iou_thresh: float,
    jobs: int,
) -> List[ImageEvalRecord]:
    items = [(annotations[i], list(detections.get(i, []))) for i in sorted(annotations)]
    return map_ordered(partial(_match_image, iou_thresh=iou_thresh), items, jobs)


def _bin_scores(
    annotations: Mapping[str, ImageAnnotation],
    detections: Mapping[str, Sequence[Detection]],
    iou_thresh: float,
    min_height: float,
    jobs: int,
) -> Tuple[List[Optional[float]], List[int]]:
    mr2s: List[Optional[float]] = []
    counts: List[int] = []
    for b in range(len(DENSITY_BIN_LABELS)):
        restricted = {i: _restrict_to_bin(image, b, min_height) for i, image in annotations.items()}
        records = _records(restricted, detections, iou_thresh, jobs)
        n_gt = sum(r.num_gt for r in records)
        counts.append(n_gt)
        mr2s.append(log_average_miss_rate(fppi_missrate_curve(records)) if n_gt else None)
    return mr2s, counts


def density_binned_report(
    annotations: Mapping[str, ImageAnnotation],
    outputs_by_method: Mapping[str, Mapping[str, Sequence[Detection]]],
    iou_thresh: float = DEFAULT_IOU_THRESH,
    min_height: float = MIN_BIN_HEIGHT,
    jobs: int = 1,
) -> Dict[str, List[Optional[float]]]:
    """Per-method MR-2 for each density bin; empty bins are None."""
    report = {}
    for method, detections in outputs_by_method.items():
        check_image_ids(annotations, detections)
        report[method], _ = _bin_scores(annotations, detections, iou_thresh, min_height, jobs)
    return report


class EvaluationService:
    @staticmethod
    def evaluate(
        annotations: Mapping[str, ImageAnnotation],
        detections: Mapping[str, Sequence[Detection]],
        iou_thresh: float = DEFAULT_IOU_THRESH,
        bins: bool = False,
        min_height: float = MIN_BIN_HEIGHT,
        jobs: int = 1,
    ) -> EvalReport:
        check_image_ids(annotations, detections)
        records = _records(annotations, detections, iou_thresh, jobs)
        curve = fppi_missrate_curve(records)
        report = EvalReport(
            mr2=log_average_miss_rate(curve),
            ap=average_precision(records),
            recall=recall(records),
            curve=curve,
            num_images=len(records),
            num_gt=sum(r.num_gt for r in records),
            num_detections=sum(len(d) for d in detections.values()),
        )
        if bins:
            report.bin_mr2, report.bin_num_gt = _bin_scores(annotations, detections, iou_thresh, min_height, jobs)
        logger.info(
            f"[EVAL] images={report.num_images} gt={report.num_gt} "
            f"MR-2={report.mr2:.4f} AP={report.ap:.4f} recall={report.recall:.4f}"
        )
        return report
