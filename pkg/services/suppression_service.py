"""
Suppression Service: one rescoring loop for greedy, soft and adaptive NMS.

Each round moves the highest-scoring detection M to the kept set and rescores
every remaining neighbour whose overlap with M reaches the active threshold.
Greedy removes those neighbours, the soft variants decay their scores. With
the adaptive flag the threshold for M becomes max(nt, density(M)).
"""
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Literal, Mapping, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from core.config import DEFAULT_NT, DEFAULT_SIGMA, DEFAULT_SOFT_SCORE_FLOOR
from core.errors import ConfigurationError, InputError, UsageError
from core.executor import map_ordered
from core.geometry import boxes_to_array, iou_matrix
from core.types import Detection

logger = logging.getLogger(__name__)

Method = Literal["greedy", "soft_linear", "soft_gaussian"]
METHODS: Tuple[str, ...] = ("greedy", "soft_linear", "soft_gaussian")

# CLI spellings -> (weight method, adaptive flag)
METHOD_ALIASES: Dict[str, Tuple[str, bool]] = {
    "greedy": ("greedy", False),
    "soft_linear": ("soft_linear", False),
    "soft_gaussian": ("soft_gaussian", False),
    "adaptive": ("greedy", True),
    "adaptive_greedy": ("greedy", True),
    "adaptive_soft_linear": ("soft_linear", True),
    "adaptive_soft_gaussian": ("soft_gaussian", True),
}


class SuppressionConfig(BaseModel):
    method: Method = "greedy"
    adaptive: bool = False
    nt: float = Field(DEFAULT_NT, gt=0.0, lt=1.0)
    sigma: float = Field(DEFAULT_SIGMA, gt=0.0)
    score_floor: float = Field(DEFAULT_SOFT_SCORE_FLOOR, ge=0.0)

    @field_validator("method", mode="before")
    @classmethod
    def _normalize_method(cls, value):
        if isinstance(value, str):
            return value.strip().lower().replace("-", "_")
        return value

    @property
    def label(self) -> str:
        name = self.method.replace("_", "-")
        return f"adaptive-{name}" if self.adaptive else name


def config_from_method_name(name: str, **overrides) -> SuppressionConfig:
    """Resolve a CLI method name such as 'adaptive' or 'soft-linear'."""
    key = name.strip().lower().replace("-", "_")
    if key not in METHOD_ALIASES:
        raise UsageError(
            f"Unknown suppression method '{name}'",
            {"allowed": sorted(k.replace("_", "-") for k in METHOD_ALIASES)},
        )
    method, adaptive = METHOD_ALIASES[key]
    if overrides.pop("adaptive", False):
        adaptive = True
    return SuppressionConfig(method=method, adaptive=adaptive, **overrides)


@dataclass(frozen=True)
class SuppressionResult:
    kept: List[Detection] = field(default_factory=list)
    suppressed_count: int = 0


def adaptive_threshold(nt: float, d_m: float) -> float:
    return max(nt, d_m)


def rescore_weight(method: str, overlap: float, sigma: float) -> float:
    if method == "greedy":
        return 0.0
    if method == "soft_linear":
        return 1.0 - overlap
    if method == "soft_gaussian":
        return math.exp(-(overlap * overlap) / sigma)
    raise InputError(f"Unknown rescoring method '{method}'")


def _rescore_weights(method: str, overlaps: np.ndarray, sigma: float) -> np.ndarray:
    if method == "soft_linear":
        return 1.0 - overlaps
    if method == "soft_gaussian":
        return np.exp(-(overlaps * overlaps) / sigma)
    return np.zeros_like(overlaps)


def _rescore_mask(overlaps: np.ndarray, cfg: SuppressionConfig, d_m: float) -> np.ndarray:
    threshold = adaptive_threshold(cfg.nt, d_m) if cfg.adaptive else cfg.nt
    if threshold > cfg.nt:
        # density-raised threshold is strict: overlap == d_M survives
        return overlaps > threshold
    return overlaps >= threshold


def suppress(dets: Sequence[Detection], cfg: SuppressionConfig) -> SuppressionResult:
    n = len(dets)
    if n == 0:
        return SuppressionResult()

    scores = np.array([d.score for d in dets], dtype=np.float64)
    if np.isnan(scores).any():
        raise InputError("Detection scores must not be NaN")
    if cfg.adaptive:
        missing = [d.source_index for d in dets if d.density is None]
        if missing:
            raise ConfigurationError(
                "Adaptive suppression needs a density on every detection",
                {"missing_source_indices": missing[:20], "missing_count": len(missing)},
            )
    densities = np.array([0.0 if d.density is None else d.density for d in dets], dtype=np.float64)
    sources = np.array([d.source_index for d in dets], dtype=np.int64)
    boxes = boxes_to_array(d.box for d in dets)

    alive = np.ones(n, dtype=bool)
    kept: List[int] = []
    while alive.any():
        idx = np.flatnonzero(alive)
        top = scores[idx].max()
        tied = idx[scores[idx] == top]
        m = int(tied[np.argmin(sources[tied])])
        kept.append(m)
        alive[m] = False

        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        overlaps = iou_matrix(boxes[m:m + 1], boxes[rest])[0]
        hit = _rescore_mask(overlaps, cfg, float(densities[m]))
        if not hit.any():
            continue
        targets = rest[hit]
        if cfg.method == "greedy":
            alive[targets] = False
            continue
        scores[targets] *= _rescore_weights(cfg.method, overlaps[hit], cfg.sigma)
        alive[targets[scores[targets] < cfg.score_floor]] = False

    return SuppressionResult(
        kept=[dets[i].with_score(float(scores[i])) for i in kept],
        suppressed_count=n - len(kept),
    )


class SuppressionService:
    @staticmethod
    def run(
        detections: Mapping[str, Sequence[Detection]],
        cfg: SuppressionConfig,
        jobs: int = 1,
    ) -> Dict[str, SuppressionResult]:
        image_ids = list(detections)
        results = map_ordered(partial(suppress, cfg=cfg), [list(detections[i]) for i in image_ids], jobs)
        out = dict(zip(image_ids, results))
        kept = sum(len(r.kept) for r in results)
        dropped = sum(r.suppressed_count for r in results)
        logger.info(f"[SUPPRESS] {cfg.label} nt={cfg.nt}: kept={kept} suppressed={dropped} over {len(image_ids)} images")
        return out
