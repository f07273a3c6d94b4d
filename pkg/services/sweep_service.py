"""
Sweep Service: method x nt grid over one dataset, one row per cell.
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence

import pandas as pd

from core.config import DEFAULT_IOU_THRESH, DEFAULT_SIGMA, DEFAULT_SOFT_SCORE_FLOOR
from core.errors import UsageError
from core.types import Detection, ImageAnnotation
from services.density_service import DensityService, DensitySource
from services.evaluation_service import EvaluationService
from services.suppression_service import SuppressionService, config_from_method_name

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "method", "adaptive", "nt", "sigma", "mr2", "ap", "recall", "kept", "suppressed",
    "bin1_mr2", "bin2_mr2", "bin3_mr2", "bin4_mr2", "bin5_mr2",
)


class SweepService:
    @staticmethod
    def run(
        annotations: Mapping[str, ImageAnnotation],
        detections: Mapping[str, Sequence[Detection]],
        methods: Sequence[str],
        nt_values: Sequence[float],
        density_source: Optional[DensitySource] = None,
        sigma: float = DEFAULT_SIGMA,
        score_floor: float = DEFAULT_SOFT_SCORE_FLOOR,
        iou_thresh: float = DEFAULT_IOU_THRESH,
        jobs: int = 1,
    ) -> pd.DataFrame:
        if not methods or not nt_values:
            raise UsageError("A sweep needs at least one method and one nt value")
        configs = [
            config_from_method_name(m, nt=nt, sigma=sigma, score_floor=score_floor)
            for m in methods
            for nt in nt_values
        ]

        with_density: Optional[Dict[str, List[Detection]]] = None
        if any(cfg.adaptive for cfg in configs):
            source = density_source or DensitySource()
            with_density = DensityService.attach(
                annotations, {k: list(v) for k, v in detections.items()}, source, jobs
            )

        rows = []
        for cfg in configs:
            inputs = with_density if cfg.adaptive else detections
            results = SuppressionService.run(inputs, cfg, jobs)
            kept = {image_id: r.kept for image_id, r in results.items()}
            report = EvaluationService.evaluate(annotations, kept, iou_thresh, bins=True, jobs=jobs)
            row = {
                "method": cfg.label,
                "adaptive": cfg.adaptive,
                "nt": cfg.nt,
                "sigma": cfg.sigma,
                "mr2": report.mr2,
                "ap": report.ap,
                "recall": report.recall,
                "kept": sum(len(r.kept) for r in results.values()),
                "suppressed": sum(r.suppressed_count for r in results.values()),
            }
            for b, value in enumerate(report.bin_mr2 or [], start=1):
                row[f"bin{b}_mr2"] = value
            rows.append(row)
            logger.info(f"[SWEEP] {cfg.label} nt={cfg.nt}: MR-2={report.mr2:.4f}")

        return pd.DataFrame(rows, columns=list(SWEEP_COLUMNS))
