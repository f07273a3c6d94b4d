import asyncio
import json
import logging
import signal
import time
import uuid
from functools import wraps
from typing import Any, Callable, Dict, List, Literal, Optional

import pandas as pd
from mcp.server.fastmcp import FastMCP
from pydantic import BaseModel, Field

from core.config import (
    DEFAULT_IOU_THRESH,
    DEFAULT_NT,
    DEFAULT_SEED,
    DEFAULT_SIGMA,
    DEFAULT_SOFT_SCORE_FLOOR,
    MCP_HOST,
    MCP_PORT,
    MCP_TOOL_ALLOWLIST,
    MCP_TRANSPORT,
    TOOL_NAME,
    TOOL_VERSION,
    configure_logging,
)
from core.errors import AnmsError
from core.geometry import BoundingBox
from core.types import Detection, GroundTruthObject, ImageAnnotation
from services.density_service import (
    DensitySource,
    attach_densities,
    crowd_statistics,
    normalize_mode,
    with_gt_densities,
)
from services.evaluation_service import EvalReport, EvaluationService
from services.io_service import read_annotations, read_detections
from services.suppression_service import METHOD_ALIASES, config_from_method_name, suppress
from services.sweep_service import SweepService
from services.synth_service import SCENE_PRESETS, DetectorParams, generate_dataset, scene_preset

configure_logging()
logger = logging.getLogger(__name__)

mcp = FastMCP(TOOL_NAME, host=MCP_HOST, port=MCP_PORT)

TOOLKIT_CAPABILITIES = [
    {
        "category": "density",
        "description": "Crowd density of ground-truth boxes: max IoU with any other non-ignored box.",
        "methods": ["compute_gt_densities"],
        "examples": ["How crowded is this set of pedestrian boxes?"],
    },
    {
        "category": "suppression",
        "description": "Greedy, soft-linear, soft-gaussian NMS, each optionally density-adaptive.",
        "methods": ["suppress_detections"],
        "examples": ["Run adaptive NMS at nt 0.5 on these detections with oracle densities."],
    },
    {
        "category": "evaluation",
        "description": "Log-average miss rate (MR-2), AP, recall and MR-2 per density bin.",
        "methods": ["evaluate_dataset", "run_nms_sweep"],
        "examples": ["Compare greedy and adaptive NMS over nt 0.4..0.7 on data/."],
    },
    {
        "category": "synthetic_data",
        "description": "Seeded crowd scenes with a simulated detector, presets caltech / citypersons / crowdhuman.",
        "methods": ["simulate_dataset"],
        "examples": ["Generate 200 crowdhuman-like images into /tmp/crowd."],
    },
    {
        "category": "server_introspection",
        "description": "Tool discovery and call metrics.",
        "methods": ["get_toolkit_capabilities", "get_server_metrics"],
        "examples": ["Show the server metrics in prometheus format."],
    },
]

TOOL_METRICS: Dict[str, Any] = {
    "requests_total": 0,
    "failures_total": 0,
    "latency_ms_total": 0.0,
    "tool_calls": {},
    "tool_failures": {},
}

TOOL_REGISTRY: Dict[str, Callable[..., Any]] = {}


class BoxInput(BaseModel):
    box: List[float] = Field(min_length=4, max_length=4)
    ignore: bool = False


class DetectionInput(BaseModel):
    box: List[float] = Field(min_length=4, max_length=4)
    score: float = Field(ge=0.0, le=1.0)
    density: Optional[float] = Field(None, ge=0.0, le=1.0)


def _normalize_error(error: Any) -> Dict[str, Any]:
    if error is None:
        return {"code": None, "message": None, "details": None}
    if isinstance(error, dict):
        return {
            "code": error.get("code"),
            "message": error.get("message") or "Unknown error",
            "details": error.get("details"),
        }
    return {"code": "runtime_error", "message": str(error), "details": None}


def _is_tool_allowed(tool_name: str) -> bool:
    if not MCP_TOOL_ALLOWLIST:
        return True
    return tool_name in MCP_TOOL_ALLOWLIST


def _failure(code: str, message: str, details: Any = None) -> Dict[str, Any]:
    return {"success": False, "data": None, "error": {"code": code, "message": message, "details": details}, "meta": {}}


def _record_metrics(tool_name: str, success: bool, latency_ms: float) -> None:
    TOOL_METRICS["requests_total"] += 1
    TOOL_METRICS["latency_ms_total"] += latency_ms
    TOOL_METRICS["tool_calls"][tool_name] = TOOL_METRICS["tool_calls"].get(tool_name, 0) + 1
    if not success:
        TOOL_METRICS["failures_total"] += 1
        TOOL_METRICS["tool_failures"][tool_name] = TOOL_METRICS["tool_failures"].get(tool_name, 0) + 1


def _prometheus_metrics() -> str:
    requests_total = TOOL_METRICS["requests_total"]
    avg_latency = TOOL_METRICS["latency_ms_total"] / requests_total if requests_total else 0.0
    lines = [
        "# HELP anms_requests_total Total tool requests",
        "# TYPE anms_requests_total counter",
        f"anms_requests_total {requests_total}",
        "# HELP anms_failures_total Total failed tool requests",
        "# TYPE anms_failures_total counter",
        f"anms_failures_total {TOOL_METRICS['failures_total']}",
        "# HELP anms_latency_avg_ms Average tool latency in ms",
        "# TYPE anms_latency_avg_ms gauge",
        f"anms_latency_avg_ms {avg_latency:.4f}",
    ]
    for name, count in sorted(TOOL_METRICS["tool_calls"].items()):
        lines.append(f'anms_tool_calls_total{{tool="{name}"}} {count}')
    for name, count in sorted(TOOL_METRICS["tool_failures"].items()):
        lines.append(f'anms_tool_failures_total{{tool="{name}"}} {count}')
    return "\n".join(lines) + "\n"


def tool_endpoint(source: str = "toolkit"):
    def decorator(func: Callable[..., Any]):
        tool_name = func.__name__

        @wraps(func)
        async def wrapper(*args, **kwargs):
            request_id = uuid.uuid4().hex
            started = time.perf_counter()

            if not _is_tool_allowed(tool_name):
                response = _failure(
                    "tool_not_allowed",
                    f"Tool '{tool_name}' is not allowed by MCP_TOOL_ALLOWLIST.",
                    {"allowlist": sorted(MCP_TOOL_ALLOWLIST)},
                )
            else:
                try:
                    response = {"success": True, "data": await func(*args, **kwargs), "error": None, "meta": {}}
                except AnmsError as exc:
                    response = {"success": False, "data": None, "error": exc.to_payload(), "meta": {}}
                except ValueError as exc:
                    response = _failure("validation_error", str(exc))
                except Exception as exc:
                    logger.exception("[TOOL_ERROR] %s failed", tool_name)
                    response = _failure("internal_error", str(exc), {"exception_type": type(exc).__name__})

            latency_ms = round((time.perf_counter() - started) * 1000.0, 3)
            response["error"] = _normalize_error(response.get("error"))
            response["meta"] = {
                "request_id": request_id,
                "source": source,
                "tool_version": TOOL_VERSION,
                "latency_ms": latency_ms,
            }
            _record_metrics(tool_name, response["success"], latency_ms)
            logger.info(
                json.dumps(
                    {
                        "event": "tool_call",
                        "tool": tool_name,
                        "success": response["success"],
                        "request_id": request_id,
                        "latency_ms": latency_ms,
                    }
                )
            )
            return response

        TOOL_REGISTRY[tool_name] = wrapper
        return wrapper

    return decorator


def _gt_objects(objects: List[Dict[str, Any]]) -> List[GroundTruthObject]:
    parsed = [BoxInput.model_validate(o) for o in objects]
    return with_gt_densities(
        [GroundTruthObject(box=BoundingBox.from_sequence(o.box), ignore=o.ignore) for o in parsed]
    )


def _detections(items: List[Dict[str, Any]]) -> List[Detection]:
    parsed = [DetectionInput.model_validate(d) for d in items]
    return [
        Detection(box=BoundingBox.from_sequence(d.box), score=d.score, density=d.density, source_index=i)
        for i, d in enumerate(parsed)
    ]


def _detection_dict(det: Detection) -> Dict[str, Any]:
    return {"box": det.box.to_list(), "score": det.score, "density": det.density, "source_index": det.source_index}


@mcp.tool()
@tool_endpoint(source="system")
async def get_toolkit_capabilities() -> Dict[str, Any]:
    """
    List what the toolkit can do, grouped by category with method names and example questions.

    Use this when the user asks what this server offers.
    """
    return {
        "tool": {"name": TOOL_NAME, "version": TOOL_VERSION},
        "methods": sorted(k.replace("_", "-") for k in METHOD_ALIASES),
        "presets": sorted(SCENE_PRESETS),
        "categories": TOOLKIT_CAPABILITIES,
    }


@mcp.tool()
@tool_endpoint()
async def compute_gt_densities(objects: List[Dict[str, Any]]) -> Dict[str, Any]:
    """
    Density of each ground-truth box of one image.

    Parameters:
        objects: [{"box": [x1, y1, x2, y2], "ignore": false}, ...]

    Example: two boxes overlapping at IoU 0.6 -> densities [0.6, 0.6]
    """
    gts = _gt_objects(objects)
    return {
        "densities": [o.density for o in gts],
        "statistics": crowd_statistics([_single_image(gts)]),
    }


def _single_image(objects: List[GroundTruthObject]) -> ImageAnnotation:
    return ImageAnnotation(image_id="inline", width=1.0, height=1.0, objects=tuple(objects))


@mcp.tool()
@tool_endpoint()
async def suppress_detections(
    detections: List[Dict[str, Any]],
    method: str = "greedy",
    nt: float = DEFAULT_NT,
    adaptive: bool = False,
    sigma: float = DEFAULT_SIGMA,
    score_floor: float = DEFAULT_SOFT_SCORE_FLOOR,
    density_source: Optional[Literal["oracle", "self-estimate", "provided"]] = None,
    ground_truth: Optional[List[Dict[str, Any]]] = None,
) -> Dict[str, Any]:
    """
    Run NMS on the detections of one image.

    Parameters:
        detections: [{"box": [x1, y1, x2, y2], "score": 0.9, "density": 0.6 (optional)}, ...]
        method: greedy | soft-linear | soft-gaussian | adaptive | adaptive-soft-linear | adaptive-soft-gaussian
        nt: base IoU threshold
        adaptive: force the density-adaptive threshold max(nt, density)
        density_source: oracle (needs ground_truth) | self-estimate | provided
        ground_truth: [{"box": [...], "ignore": false}, ...] for the oracle source

    Returns the kept detections in selection order with their final scores.
    """
    cfg = config_from_method_name(method, adaptive=adaptive, nt=nt, sigma=sigma, score_floor=score_floor)
    dets = _detections(detections)
    if cfg.adaptive:
        source = DensitySource(mode=normalize_mode(density_source or "provided"))
        gts = _gt_objects(ground_truth) if ground_truth is not None else None
        dets = attach_densities(dets, gts, source)
    result = suppress(dets, cfg)
    return {
        "config": cfg.model_dump(),
        "kept": [_detection_dict(d) for d in result.kept],
        "suppressed_count": result.suppressed_count,
    }


def _evaluate_files(annotations_path: str, detections_path: str, iou_thresh: float, bins: bool) -> EvalReport:
    return EvaluationService.evaluate(
        read_annotations(annotations_path), read_detections(detections_path), iou_thresh, bins
    )


def _sweep_files(
    annotations_path: str,
    detections_path: str,
    methods: List[str],
    nt_values: List[float],
    source: Optional[DensitySource],
) -> pd.DataFrame:
    return SweepService.run(
        read_annotations(annotations_path), read_detections(detections_path), methods, nt_values, source
    )


@mcp.tool()
@tool_endpoint(source="files")
async def evaluate_dataset(
    annotations_path: str,
    detections_path: str,
    iou_thresh: float = DEFAULT_IOU_THRESH,
    bins: bool = True,
) -> Dict[str, Any]:
    """
    MR-2, AP, recall and the FPPI / miss-rate curve of a detection file against its annotations.

    Parameters:
        annotations_path: JSON-lines annotation file
        detections_path: JSON-lines detection file (already suppressed)
        bins: also report MR-2 per density bin
    """
    report = await asyncio.to_thread(_evaluate_files, annotations_path, detections_path, iou_thresh, bins)
    return report.to_dict()


@mcp.tool()
@tool_endpoint(source="files")
async def simulate_dataset(
    output_dir: str,
    preset: str = "crowdhuman",
    n_images: int = 100,
    seed: int = DEFAULT_SEED,
) -> Dict[str, Any]:
    """
    Write a seeded synthetic crowd dataset (annotations.jsonl, detections.jsonl, manifest.json).

    Parameters:
        output_dir: target directory, created if missing
        preset: caltech | citypersons | crowdhuman
        n_images: number of images
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    scene = scene_preset(preset, seed=seed)
    paths = await asyncio.to_thread(generate_dataset, n_images, scene, DetectorParams(seed=seed), output_dir)
    return {"paths": paths, "n_images": n_images, "preset": preset, "seed": seed}


@mcp.tool()
@tool_endpoint(source="files")
async def run_nms_sweep(
    annotations_path: str,
    detections_path: str,
    methods: Optional[List[str]] = None,
    nt_values: Optional[List[float]] = None,
    density_source: Optional[Literal["oracle", "self-estimate", "provided"]] = None,
) -> Dict[str, Any]:
    """
    Evaluate every (method, nt) cell over the same data; one row per cell.

    Defaults: methods [greedy, adaptive], nt_values [0.4, 0.5, 0.6, 0.7].
    """
    source = DensitySource(mode=normalize_mode(density_source)) if density_source else None
    table = await asyncio.to_thread(
        _sweep_files,
        annotations_path,
        detections_path,
        methods or ["greedy", "adaptive"],
        nt_values or [0.4, 0.5, 0.6, 0.7],
        source,
    )
    return {"rows": json.loads(table.to_json(orient="records"))}


@mcp.tool()
@tool_endpoint(source="system")
async def get_server_metrics(format: Literal["json", "prometheus"] = "json") -> Dict[str, Any]:
    """In-process tool call counters, as JSON or prometheus text."""
    if format == "prometheus":
        return {"format": "prometheus", "text": _prometheus_metrics()}
    requests_total = TOOL_METRICS["requests_total"]
    return {
        "format": "json",
        "requests_total": requests_total,
        "failures_total": TOOL_METRICS["failures_total"],
        "avg_latency_ms": TOOL_METRICS["latency_ms_total"] / requests_total if requests_total else 0.0,
        "tool_calls": dict(TOOL_METRICS["tool_calls"]),
        "tool_failures": dict(TOOL_METRICS["tool_failures"]),
    }


def _handle_signal(sig, frame):
    logger.info(f"[SIGNAL] Received {signal.Signals(sig).name}, shutting down...")
    raise KeyboardInterrupt


def main():
    """CLI entrypoint for adaptive-nms-mcp."""
    signal.signal(signal.SIGTERM, _handle_signal)

    logger.info(f"[SERVER] Starting {TOOL_NAME} MCP server (transport={MCP_TRANSPORT}, host={MCP_HOST}, port={MCP_PORT})")
    try:
        mcp.run(transport=MCP_TRANSPORT)
    except KeyboardInterrupt:
        pass
    except Exception as e:
        logger.critical(f"Server crashed: {e}")


if __name__ == "__main__":
    main()
