"""
Runtime configuration for the adaptive-NMS toolkit.
Every default can be overridden through an environment variable.
"""
import logging
import os
from typing import Optional

TOOL_NAME = "adaptive-nms"
TOOL_VERSION = "0.1.0"

LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Suppression defaults
DEFAULT_NT = float(os.environ.get("ANMS_NT", "0.5"))
DEFAULT_SIGMA = float(os.environ.get("ANMS_SIGMA", "0.5"))
DEFAULT_SOFT_SCORE_FLOOR = float(os.environ.get("ANMS_SOFT_SCORE_FLOOR", "0.001"))

# Density sources
DEFAULT_SELF_ESTIMATE_FLOOR = float(os.environ.get("ANMS_SELF_ESTIMATE_FLOOR", "0.05"))
ORACLE_MATCH_IOU = float(os.environ.get("ANMS_ORACLE_MATCH_IOU", "0.5"))

# Evaluation protocol
DEFAULT_IOU_THRESH = float(os.environ.get("ANMS_IOU_THRESH", "0.5"))
IGNORE_IOA_THRESH = float(os.environ.get("ANMS_IGNORE_IOA", "0.5"))
MIN_BIN_HEIGHT = float(os.environ.get("ANMS_MIN_BIN_HEIGHT", "50"))
MISS_RATE_FLOOR = 1e-10

# Execution
DEFAULT_JOBS = int(os.environ.get("ANMS_JOBS", "1"))
DEFAULT_SEED = int(os.environ.get("ANMS_SEED", "20190606"))

# File formats
SIGNIFICANT_DIGITS = 6

# MCP server
MCP_HOST = os.environ.get("MCP_HOST", "0.0.0.0")
MCP_PORT = int(os.environ.get("MCP_PORT", "8000"))
MCP_TRANSPORT = os.environ.get("MCP_TRANSPORT", "stdio")  # "stdio" for local clients, "sse" for network
MCP_TOOL_ALLOWLIST = {
    item.strip()
    for item in os.environ.get("MCP_TOOL_ALLOWLIST", "").split(",")
    if item.strip()
}


def configure_logging(level: Optional[str] = None) -> None:
    """Route log records to stderr with the house format."""
    name = (level or LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format=LOG_FORMAT,
        force=True,
    )


def quantize(value: float) -> float:
    """Round to the declared file precision (6 significant digits)."""
    return float(f"{float(value):.{SIGNIFICANT_DIGITS}g}")
