"""
Density Service: ground-truth crowd density and per-detection density sources.

The density of an object is its maximum IoU with any other non-ignored object of
the same image, 0 when it has no such neighbour. Detections get a density from
one of three sources: the matched ground truth (oracle), their own co-detections
(self_estimate), or the input file (provided).
"""
import logging
from dataclasses import replace
from functools import partial
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from core.config import DEFAULT_SELF_ESTIMATE_FLOOR, ORACLE_MATCH_IOU
from core.errors import ConfigurationError
from core.executor import map_ordered
from core.geometry import boxes_to_array, iou_matrix
from core.types import Detection, GroundTruthObject, ImageAnnotation

logger = logging.getLogger(__name__)

DensityMode = Literal["oracle", "self_estimate", "provided"]
DEFAULT_CROWD_THRESHOLDS = (0.3, 0.5, 0.7)


class DensitySource(BaseModel):
    mode: DensityMode = "provided"
    score_floor: float = Field(DEFAULT_SELF_ESTIMATE_FLOOR, ge=0.0, le=1.0)
    oracle_match_iou: float = Field(ORACLE_MATCH_IOU, gt=0.0, le=1.0)


def normalize_mode(raw: str) -> str:
    return raw.strip().lower().replace("-", "_")


def _max_neighbour_iou(ious: np.ndarray, eligible: np.ndarray) -> np.ndarray:
    """Row-wise max over eligible columns excluding the diagonal; 0 when none."""
    n = ious.shape[0]
    if n == 0:
        return np.zeros(0)
    mask = np.broadcast_to(eligible[None, :], ious.shape).copy()
    np.fill_diagonal(mask, False)
    return np.where(mask, ious, 0.0).max(axis=1)


def gt_densities(objects: Sequence[GroundTruthObject]) -> List[float]:
    if not objects:
        return []
    ious = iou_matrix(boxes_to_array(o.box for o in objects), boxes_to_array(o.box for o in objects))
    eligible = np.array([not o.ignore for o in objects], dtype=bool)
    return [float(d) for d in _max_neighbour_iou(ious, eligible)]


def with_gt_densities(objects: Sequence[GroundTruthObject]) -> List[GroundTruthObject]:
    return [replace(o, density=d) for o, d in zip(objects, gt_densities(objects))]


def _oracle(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], match_iou: float) -> List[Detection]:
    persons = [g for g in gts if not g.ignore]
    if not persons:
        return [d.with_density(0.0) for d in dets]
    ious = iou_matrix(boxes_to_array(d.box for d in dets), boxes_to_array(g.box for g in persons))
    best = ious.argmax(axis=1)
    out = []
    for i, det in enumerate(dets):
        j = int(best[i])
        out.append(det.with_density(persons[j].density if ious[i, j] >= match_iou else 0.0))
    return out


def _self_estimate(dets: Sequence[Detection], score_floor: float) -> List[Detection]:
    ious = iou_matrix(boxes_to_array(d.box for d in dets), boxes_to_array(d.box for d in dets))
    eligible = np.array([d.score >= score_floor for d in dets], dtype=bool)
    return [d.with_density(float(v)) for d, v in zip(dets, _max_neighbour_iou(ious, eligible))]


def attach_densities(
    dets: Sequence[Detection],
    gts: Optional[Sequence[GroundTruthObject]],
    source: DensitySource,
) -> List[Detection]:
    if source.mode == "provided":
        missing = [d.source_index for d in dets if d.density is None]
        if missing:
            raise ConfigurationError(
                "Density source 'provided' needs a density on every detection",
                {"missing_source_indices": missing[:20], "missing_count": len(missing)},
            )
        return list(dets)
    if source.mode == "oracle":
        if gts is None:
            raise ConfigurationError("Density source 'oracle' needs ground-truth objects")
        return _oracle(dets, gts, source.oracle_match_iou) if dets else []
    return _self_estimate(dets, source.score_floor) if dets else []


def crowd_statistics(
    images: Sequence[ImageAnnotation],
    thresholds: Sequence[float] = DEFAULT_CROWD_THRESHOLDS,
) -> Dict[str, object]:
    """Persons per image and pairs per image above each IoU threshold."""
    n_images = len(images)
    persons = 0
    pairs = {t: 0 for t in thresholds}
    densities: List[float] = []
    for image in images:
        boxes = boxes_to_array(o.box for o in image.persons)
        persons += len(boxes)
        if len(boxes) >= 2:
            upper = iou_matrix(boxes, boxes)[np.triu_indices(len(boxes), k=1)]
            for t in thresholds:
                pairs[t] += int((upper > t).sum())
        densities.extend(o.density for o in image.persons)
    return {
        "num_images": n_images,
        "persons_per_image": persons / n_images if n_images else 0.0,
        "pairs_per_image": {str(t): (pairs[t] / n_images if n_images else 0.0) for t in thresholds},
        "mean_density": float(np.mean(densities)) if densities else 0.0,
    }


def _attach_one(item: Tuple[List[Detection], Optional[List[GroundTruthObject]]], source: DensitySource) -> List[Detection]:
    dets, gts = item
    return attach_densities(dets, gts, source)


class DensityService:
    @staticmethod
    def attach(
        annotations: Optional[Mapping[str, ImageAnnotation]],
        detections: Mapping[str, List[Detection]],
        source: DensitySource,
        jobs: int = 1,
    ) -> Dict[str, List[Detection]]:
        """Attach densities image by image, preserving image order."""
        if source.mode == "oracle" and annotations is None:
            raise ConfigurationError("Density source 'oracle' needs an annotation file")
        image_ids = list(detections)
        items = []
        for image_id in image_ids:
            gts = None
            if annotations is not None:
                image = annotations.get(image_id)
                gts = list(image.objects) if image else []
            items.append((list(detections[image_id]), gts))
        logger.info(f"[DENSITY] Attaching '{source.mode}' densities to {len(image_ids)} images")
        attached = map_ordered(partial(_attach_one, source=source), items, jobs)
        return dict(zip(image_ids, attached))

    @staticmethod
    def annotate(annotations: Mapping[str, ImageAnnotation]) -> Dict[str, ImageAnnotation]:
        """Recompute the density field of every object."""
        return {
            image_id: replace(image, objects=tuple(with_gt_densities(image.objects)))
            for image_id, image in annotations.items()
        }
