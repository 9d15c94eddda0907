"""
Command-line entry point: ``python -m latticegp <command> --config run.json``.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from . import DEFAULT_THREADS, LOG_LEVEL, __version__
from .commands import CommandRouter, RunContext
from .commands.benchmark import router as benchmark_router
from .commands.fit import router as fit_router
from .commands.simulate import router as simulate_router
from .commands.study import router as study_router
from .errors import ConfigError, GridIOError, LatticeGPError
from .schemas import RunConfig
from .utils.bccb import set_fft_workers
from .utils.gridio import write_manifest

logger = logging.getLogger("latticegp")

app = CommandRouter()
app.include_router(simulate_router)
app.include_router(fit_router)
app.include_router(benchmark_router)
app.include_router(study_router)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latticegp", description="Gaussian process estimation on large lattices")
    parser.add_argument("command", nargs="?", help=f"one of {', '.join(sorted(app.routes))}; overrides the config's command")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int, help="worker count (default LATTICEGP_THREADS)")
    parser.add_argument("--out", type=Path, help="output directory (overrides io.out)")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument("--version", action="version", version=f"latticegp {__version__}")
    return parser


def setup_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL, logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s", "%H:%M:%S"))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


def load_config(args: argparse.Namespace) -> RunConfig:
    raw = {}
    if args.config is not None:
        try:
            raw = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config} is not valid JSON: {exc}") from exc
        except OSError as exc:
            raise GridIOError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config} must hold a JSON object")
    if args.command:
        raw["command"] = args.command
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    if args.out is not None:
        raw.setdefault("io", {})["out"] = str(args.out)
    cfg = RunConfig.model_validate(raw)
    if cfg.command is None:
        raise ConfigError("no command given (positional argument or config 'command')")
    return cfg


def run(cfg: RunConfig) -> Path:
    """Execute one configured command and write its manifest; returns the output directory."""
    started = time.perf_counter()
    out = Path(cfg.io.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = cfg.threads or DEFAULT_THREADS
    set_fft_workers(threads)
    ctx = RunContext(cfg=cfg, out=out, seed=cfg.seed, threads=threads)

    report = app.dispatch(cfg.command, ctx)

    wall = time.perf_counter() - started
    write_manifest(out, cfg.model_dump(mode="json", by_alias=True), cfg.seed, wall, report.pcg.as_dict(),
                   report.artifacts, report.extra)
    for line in report.lines:
        print(line)
    print(f"✅ {cfg.command} finished in {wall:.1f}s; {len(report.artifacts)} artifacts in {out}")
    return out


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        run(load_config(args))
    except ValidationError as exc:
        print(f"⚠️ invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LatticeGPError as exc:
        print(f"⚠️ {type(exc).__name__}: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"⚠️ I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
