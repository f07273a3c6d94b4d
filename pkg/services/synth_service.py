"""
Synth Service: seeded crowd scenes and a simulated detector.

Scenes hold single pedestrians placed uniformly plus constructed crowd pairs
whose IoU is drawn from a target range. The detector emits jittered duplicate
proposals per person (scores fall with jitter) and low-scored background boxes.

Seed splitting: image k of stream s (0 = scene, 1 = detector) draws from
Generator(PCG64(SeedSequence(seed, spawn_key=(k, s)))), so any image can be
regenerated alone and parallel generation matches sequential generation.
"""
import json
import logging
import os
from functools import partial
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from core.config import DEFAULT_SEED, TOOL_NAME, TOOL_VERSION, quantize
from core.executor import map_ordered
from core.geometry import BoundingBox, iou
from core.types import Detection, GroundTruthObject, ImageAnnotation
from services.density_service import with_gt_densities
from services.io_service import write_annotations, write_detections, write_json

logger = logging.getLogger(__name__)

SCENE_STREAM = 0
DETECTOR_STREAM = 1
MIN_PERSON_HEIGHT = 50.0

ANNOTATIONS_FILE = "annotations.jsonl"
DETECTIONS_FILE = "detections.jsonl"
MANIFEST_FILE = "manifest.json"

# persons per image and IoU>0.5 pairs per image of the reference benchmarks
SCENE_PRESETS: Dict[str, Dict[str, object]] = {
    "caltech": {
        "image_width": 640.0, "image_height": 480.0,
        "persons_per_image": 0.32, "crowd_pair_rate": 0.02,
        "person_height_range": (50.0, 200.0),
    },
    "citypersons": {
        "image_width": 2048.0, "image_height": 1024.0,
        "persons_per_image": 6.47, "crowd_pair_rate": 0.32,
        "person_height_range": (50.0, 400.0),
    },
    "crowdhuman": {
        "image_width": 1280.0, "image_height": 800.0,
        "persons_per_image": 22.64, "crowd_pair_rate": 2.40,
        "person_height_range": (50.0, 300.0),
    },
}


class SceneParams(BaseModel):
    image_width: float = Field(1280.0, gt=0)
    image_height: float = Field(800.0, gt=0)
    persons_per_image: float = Field(22.64, ge=0)
    crowd_pair_rate: float = Field(2.40, ge=0)
    person_height_range: Tuple[float, float] = (50.0, 300.0)
    aspect_ratio: float = Field(0.41, gt=0)
    pair_iou_range: Tuple[float, float] = (0.5, 0.8)
    max_incidental_iou: float = Field(0.5, gt=0, le=1)
    ignore_rate: float = Field(0.0, ge=0)
    max_retries: int = Field(100, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0)

    @model_validator(mode="after")
    def _check_geometry(self):
        lo, hi = self.person_height_range
        if lo < MIN_PERSON_HEIGHT or hi < lo:
            raise ValueError(f"person_height_range must satisfy {MIN_PERSON_HEIGHT} <= min <= max, got {self.person_height_range}")
        if hi >= self.image_height or self.aspect_ratio * hi * 2 >= self.image_width:
            raise ValueError("person_height_range does not fit inside the image")
        p_lo, p_hi = self.pair_iou_range
        if not 0.0 < p_lo < p_hi < 1.0:
            raise ValueError(f"pair_iou_range must satisfy 0 < low < high < 1, got {self.pair_iou_range}")
        return self


class DetectorParams(BaseModel):
    localization_noise: float = Field(0.05, ge=0)
    duplicate_count: int = Field(3, ge=1)
    base_score: float = Field(0.9, ge=0, le=1)
    score_slope: float = Field(1.5, ge=0)
    score_noise: float = Field(0.05, ge=0)
    fp_rate: float = Field(1.0, ge=0)
    fp_score_range: Tuple[float, float] = (0.05, 0.5)
    fp_height_range: Tuple[float, float] = (50.0, 200.0)
    seed: int = Field(DEFAULT_SEED, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self):
        s_lo, s_hi = self.fp_score_range
        if not 0.0 <= s_lo <= s_hi <= 1.0:
            raise ValueError(f"fp_score_range must lie in [0, 1], got {self.fp_score_range}")
        h_lo, h_hi = self.fp_height_range
        if not 0.0 < h_lo <= h_hi:
            raise ValueError(f"fp_height_range must be positive, got {self.fp_height_range}")
        return self


def scene_preset(name: str, **overrides) -> SceneParams:
    key = name.strip().lower()
    if key not in SCENE_PRESETS:
        raise ValueError(f"Unknown scene preset '{name}'. Allowed: {sorted(SCENE_PRESETS)}")
    return SceneParams(**{**SCENE_PRESETS[key], **overrides})


def image_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index, stream))))


def image_id_for(index: int) -> str:
    return f"img_{index:06d}"


def _box(x1: float, y1: float, x2: float, y2: float, width: float, height: float) -> BoundingBox:
    return BoundingBox(
        quantize(max(0.0, x1)), quantize(max(0.0, y1)),
        min(quantize(x2), width), min(quantize(y2), height),
    )


def _is_clear(box: BoundingBox, placed: List[BoundingBox], limit: float) -> bool:
    return all(iou(box, other) <= limit for other in placed)


def _place_single(rng: np.random.Generator, p: SceneParams, placed: List[BoundingBox]) -> Optional[BoundingBox]:
    for _ in range(p.max_retries):
        h = rng.uniform(*p.person_height_range)
        w = p.aspect_ratio * h
        x1 = rng.uniform(0.0, p.image_width - w)
        y1 = rng.uniform(0.0, p.image_height - h)
        box = _box(x1, y1, x1 + w, y1 + h, p.image_width, p.image_height)
        if _is_clear(box, placed, p.max_incidental_iou):
            return box
    return None


def _place_pair(
    rng: np.random.Generator, p: SceneParams, placed: List[BoundingBox]
) -> Optional[Tuple[BoundingBox, BoundingBox]]:
    lo, hi = p.pair_iou_range
    for _ in range(p.max_retries):
        target = rng.uniform(lo, hi)
        h = rng.uniform(*p.person_height_range)
        w = p.aspect_ratio * h
        # horizontal shift of a clone giving IoU == target
        dx = w * (1.0 - target) / (1.0 + target)
        x1 = rng.uniform(0.0, p.image_width - w - dx)
        y1 = rng.uniform(0.0, p.image_height - h)
        first = _box(x1, y1, x1 + w, y1 + h, p.image_width, p.image_height)
        second = _box(x1 + dx, y1, x1 + dx + w, y1 + h, p.image_width, p.image_height)
        if not lo < iou(first, second) < hi:
            continue
        if _is_clear(first, placed, p.max_incidental_iou) and _is_clear(second, placed, p.max_incidental_iou):
            return first, second
    return None


def _ignore_region(rng: np.random.Generator, p: SceneParams) -> BoundingBox:
    w = rng.uniform(0.1, 0.3) * p.image_width
    h = rng.uniform(*p.person_height_range)
    x1 = rng.uniform(0.0, p.image_width - w)
    y1 = rng.uniform(0.0, p.image_height - h)
    return _box(x1, y1, x1 + w, y1 + h, p.image_width, p.image_height)


def generate_scene(params: SceneParams, index: int = 0) -> Tuple[List[GroundTruthObject], List[BoundingBox]]:
    """Persons (with densities) and ignore regions for image `index`."""
    rng = image_rng(params.seed, index, SCENE_STREAM)
    n_persons = int(rng.poisson(params.persons_per_image))
    n_pairs = min(int(rng.poisson(params.crowd_pair_rate)), n_persons // 2)

    placed: List[BoundingBox] = []
    skipped = 0
    for _ in range(n_pairs):
        pair = _place_pair(rng, params, placed)
        if pair is None:
            skipped += 2
            continue
        placed.extend(pair)
    for _ in range(n_persons - 2 * n_pairs):
        box = _place_single(rng, params, placed)
        if box is None:
            skipped += 1
            continue
        placed.append(box)
    if skipped:
        logger.debug(f"[SYNTH] image {index}: skipped {skipped} persons after {params.max_retries} retries")

    regions = [_ignore_region(rng, params) for _ in range(int(rng.poisson(params.ignore_rate)))]
    objects = with_gt_densities(
        [GroundTruthObject(box=b) for b in placed] + [GroundTruthObject(box=r, ignore=True) for r in regions]
    )
    return objects[: len(placed)], regions


def _jitter(rng: np.random.Generator, box: BoundingBox, noise: float, width: float, height: float) -> BoundingBox:
    w, h = box.width, box.height
    cx = (box.x1 + box.x2) / 2.0 + rng.normal(0.0, noise * w)
    cy = (box.y1 + box.y2) / 2.0 + rng.normal(0.0, noise * h)
    w *= float(np.exp(rng.normal(0.0, noise)))
    h *= float(np.exp(rng.normal(0.0, noise)))
    x1, x2 = max(0.0, cx - w / 2.0), min(width, cx + w / 2.0)
    y1, y2 = max(0.0, cy - h / 2.0), min(height, cy + h / 2.0)
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return box
    return _box(x1, y1, x2, y2, width, height)


def simulate_detector(
    gts: List[GroundTruthObject],
    params: DetectorParams,
    image_size: Tuple[float, float],
    index: int = 0,
) -> List[Detection]:
    rng = image_rng(params.seed, index, DETECTOR_STREAM)
    width, height = image_size
    proposals: List[Tuple[BoundingBox, float]] = []

    for gt in gts:
        if gt.ignore:
            continue
        for _ in range(params.duplicate_count):
            box = gt.box if params.localization_noise == 0 else _jitter(rng, gt.box, params.localization_noise, width, height)
            eps = rng.uniform(-params.score_noise, params.score_noise)
            score = params.base_score - params.score_slope * (1.0 - iou(box, gt.box)) + eps
            proposals.append((box, quantize(min(1.0, max(0.0, score)))))

    for _ in range(int(rng.poisson(params.fp_rate))):
        h = min(rng.uniform(*params.fp_height_range), height - 1.0)
        w = min(0.41 * h, width - 1.0)
        x1 = rng.uniform(0.0, width - w)
        y1 = rng.uniform(0.0, height - h)
        proposals.append((_box(x1, y1, x1 + w, y1 + h, width, height), quantize(rng.uniform(*params.fp_score_range))))

    return [Detection(box=box, score=score, source_index=i) for i, (box, score) in enumerate(proposals)]


def _generate_image(index: int, scene: SceneParams, detector: DetectorParams) -> Tuple[ImageAnnotation, List[Detection]]:
    persons, regions = generate_scene(scene, index)
    # ignore regions become ignored objects; their own densities are filled too
    objects = with_gt_densities(list(persons) + [GroundTruthObject(box=r, ignore=True) for r in regions])
    image = ImageAnnotation(
        image_id=image_id_for(index),
        width=scene.image_width,
        height=scene.image_height,
        objects=tuple(objects),
    )
    dets = simulate_detector(persons, detector, (scene.image_width, scene.image_height), index)
    return image, dets


class SynthService:
    @staticmethod
    def build(
        n_images: int,
        scene: SceneParams,
        detector: DetectorParams,
        jobs: int = 1,
    ) -> Tuple[Dict[str, ImageAnnotation], Dict[str, List[Detection]]]:
        generated = map_ordered(partial(_generate_image, scene=scene, detector=detector), range(n_images), jobs)
        annotations = {image.image_id: image for image, _ in generated}
        detections = {image.image_id: dets for image, dets in generated}
        logger.info(
            f"[SYNTH] {n_images} images, {sum(len(a.persons) for a in annotations.values())} persons, "
            f"{sum(len(d) for d in detections.values())} raw detections"
        )
        return annotations, detections


def generate_dataset(
    n_images: int,
    scene_params: SceneParams,
    detector_params: DetectorParams,
    output_dir: str,
    jobs: int = 1,
) -> Dict[str, str]:
    """Write annotations, raw detections and a manifest into `output_dir`."""
    annotations, detections = SynthService.build(n_images, scene_params, detector_params, jobs)
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "annotations": os.path.join(output_dir, ANNOTATIONS_FILE),
        "detections": os.path.join(output_dir, DETECTIONS_FILE),
        "manifest": os.path.join(output_dir, MANIFEST_FILE),
    }
    write_annotations(paths["annotations"], annotations)
    write_detections(paths["detections"], detections)
    write_json(paths["manifest"], {
        "tool": {"name": TOOL_NAME, "version": TOOL_VERSION},
        "command": "simulate",
        "n_images": n_images,
        "scene": json.loads(scene_params.model_dump_json()),
        "detector": json.loads(detector_params.model_dump_json()),
        "seed_rule": "Generator(PCG64(SeedSequence(seed, spawn_key=(image_index, stream)))); stream 0 = scene, 1 = detector",
        "files": {"annotations": ANNOTATIONS_FILE, "detections": DETECTIONS_FILE},
    })
    logger.info(f"[SYNTH] Dataset written to {output_dir}")
    return paths
