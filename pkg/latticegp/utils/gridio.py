"""
Grid files, tabular outputs and run manifests.

A grid is a headerless CSV body (n1 rows, n2 columns, NaN = missing) with
a JSON sidecar of the same stem holding the GridHeader.
"""
import json
import logging
import platform
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy
from pydantic import ValidationError

from .. import __version__
from ..errors import GridIOError
from ..schemas import GridHeader
from .lattice import LatticeSpec, ObservationMask, build_embedding, build_lattice

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.17g"


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _read_body(path: Path) -> np.ndarray:
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError as exc:
        raise GridIOError(f"grid file {path} is empty") from exc
    except pd.errors.ParserError as exc:
        raise GridIOError(f"grid file {path} has ragged rows: {exc}") from exc
    cells = frame.apply(lambda col: col.str.strip())
    missing = cells.isin(["", "NaN", "nan", "NA"])
    try:
        values = cells.mask(missing).astype(float)
    except (ValueError, TypeError) as exc:
        raise GridIOError(f"grid file {path} has non-numeric cells: {exc}") from exc
    grid = values.to_numpy(dtype=float)
    if np.isinf(grid).any():
        raise GridIOError(f"grid file {path} has infinite cells")
    return grid


def read_header(path: PathLike) -> GridHeader:
    side = sidecar_path(path)
    if not side.exists():
        raise GridIOError(f"grid header {side} not found")
    try:
        return GridHeader.model_validate_json(side.read_text())
    except ValidationError as exc:
        raise GridIOError(f"grid header {side} is invalid: {exc.errors()[0]['msg']}") from exc


def read_grid(path: PathLike) -> Tuple[np.ndarray, GridHeader]:
    path = Path(path)
    if not path.exists():
        raise GridIOError(f"grid file {path} not found")
    header = read_header(path)
    grid = _read_body(path)
    if grid.shape != (header.n1, header.n2):
        raise GridIOError(f"grid {path} is {grid.shape[0]}x{grid.shape[1]} but its header says {header.n1}x{header.n2}")
    missing = int(np.isnan(grid).sum())
    if missing != header.missing_count:
        logger.warning("[GRID] %s: header says %d missing cells, body has %d", path, header.missing_count, missing)
    return grid, header


def ingest_grid(path: PathLike, r_factor: float = 1.5) -> Tuple[np.ndarray, LatticeSpec, ObservationMask]:
    """Observed values in lexicographic order, the base lattice and a mask tagged ``file``."""
    grid, header = read_grid(path)
    flags = ~np.isnan(grid)
    if not flags.any():
        raise GridIOError(f"grid {path} has no observed values")
    base = build_lattice(header.n1, header.n2, header.s)
    mask = ObservationMask.from_base_flags(build_embedding(base, r_factor), flags, "file")
    z_o = grid[flags]
    logger.info("[GRID] %s: %dx%d lattice, %d observed, %d missing", path, header.n1, header.n2, mask.n, grid.size - mask.n)
    return z_o, base, mask


def write_grid(path: PathLike, grid: np.ndarray, s: float, provenance: Optional[Dict[str, object]] = None) -> Path:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = GridHeader(
        n1=grid.shape[0], n2=grid.shape[1], s=s,
        missing_count=int(np.isnan(grid).sum()), provenance=provenance or {},
    )
    pd.DataFrame(grid).to_csv(path, header=False, index=False, na_rep="NaN", float_format=FLOAT_FORMAT)
    sidecar_path(path).write_text(header.model_dump_json(indent=2))
    return path


def write_table(path: PathLike, rows: Iterable[Sequence], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_records(path: PathLike, records: Sequence[Dict[str, object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame.from_records(records).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def software_versions() -> Dict[str, str]:
    return {
        "latticegp": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def write_manifest(
    out_dir: PathLike,
    config: Dict[str, object],
    seed: int,
    wall_seconds: float,
    pcg: Optional[Dict[str, object]] = None,
    artifacts: Sequence[str] = (),
    extra: Optional[Dict[str, object]] = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": config.get("command"),
        # seeds are 64-bit; keep them exact for JSON readers with double precision
        "seed": str(seed),
        "config": config,
        "versions": software_versions(),
        "wall_seconds": round(wall_seconds, 4),
        "pcg": pcg or {},
        "artifacts": sorted(artifacts),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return path


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
