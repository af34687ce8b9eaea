#!/usr/bin/env python3
"""mvsde command line: ``mvsde <experiment> --config <path> [--seed] [--threads] [--out] [--check]``."""

from __future__ import annotations

import argparse
import importlib
import logging
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .config import EXPERIMENTS, load_config
from .errors import AcceptanceError, MvsdeError
from .experiments import RUNNERS

logger = logging.getLogger("mvsde")


def resolve_func(path: str, fname: str) -> Callable:
    mod = importlib.import_module(path)
    fn = getattr(mod, fname, None)
    if not callable(fn):
        raise ImportError(f"Module '{path}' does not define required function '{fname}()'.")
    return fn


def setup_logging(out_dir: Path, verbose: bool = False) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    log_file = out_dir / "mvsde.log"
    logging.basicConfig(filename=str(log_file),
                        filemode="w",
                        level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s - %(levelname)s - %(message)s",
                        force=True)
    return log_file


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvsde", description="McKean-Vlasov SDE convergence experiments")
    ap.add_argument("experiment", choices=EXPERIMENTS, help="Experiment to run")
    ap.add_argument("-c", "--config", required=True, help="INI experiment config")
    ap.add_argument("--seed", type=int, help="Master seed (overrides [run] seed)")
    ap.add_argument("--threads", type=int, help="Replication threads (overrides MVSDE_THREADS and [run] threads)")
    ap.add_argument("-o", "--out", help="Output root directory (overrides [run] out)")
    ap.add_argument("--check", action="store_true", help="Exit with status 4 if an acceptance check fails")
    ap.add_argument("--dump-paths", action="store_true", default=None, help="Save replication-0 trajectories as .npy")
    ap.add_argument("--verbose", action="store_true", help="Debug logging")
    ap.add_argument("--version", action="version", version=f"mvsde {__version__}")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {
            "experiment": args.experiment,
            "seed": args.seed,
            "threads": args.threads,
            "out": args.out,
            "dump_paths": args.dump_paths,
        })
        write_result = resolve_func("mvsde.report", "write_result")
        out_dir = resolve_func("mvsde.report", "output_dir")(cfg)
        setup_logging(out_dir, args.verbose)
        logger.info("mvsde %s: %s", __version__, cfg.as_dict())

        runner = resolve_func("mvsde.experiments", RUNNERS[cfg.experiment])
        print(f"\n[+] Starting {cfg.experiment} (kernel={cfg.kernel.name}, replications={cfg.replications}, "
              f"threads={cfg.threads}, seed={cfg.seed})...")
        result = runner(cfg)
        path = write_result(result, cfg, out_dir)
        print(f"[✓] Saved: {path}")
        for name, ok in result.checks.items():
            print(f"[i] check {name}: {'PASS' if ok else 'FAIL'}")
        if args.check and result.failed_checks:
            raise AcceptanceError(result.failed_checks)
        return 0
    except MvsdeError as e:
        logger.error("%s", e, exc_info=True)
        print(f"[!] {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
