"""latticegp: exact Bayesian and maximum likelihood estimation for Gaussian
processes on large, possibly incomplete, 2-D lattices."""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

__version__ = "0.3.0"

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

# Load .env from project root (local runs only); real environment wins
env_path = Path(__file__).parent.parent / ".env"
if env_path.exists():
    load_dotenv(dotenv_path=env_path, override=False)
    logger.debug("[LATTICEGP] Loaded .env from %s", env_path)

DENSE_MAX_N = int(os.getenv("LATTICEGP_DENSE_MAX_N", "12000"))
DEFAULT_THREADS = int(os.getenv("LATTICEGP_THREADS", "1"))
LOG_LEVEL = os.getenv("LATTICEGP_LOG_LEVEL", "INFO").upper()

__all__ = ["__version__", "DENSE_MAX_N", "DEFAULT_THREADS", "LOG_LEVEL"]
