"""Result emission: CSV tables (17 significant digits), raw replications, timings and a JSON summary."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

from . import __version__
from .config import ExperimentConfig
from .experiments import ExperimentResult

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["param", "estimate", "stderr", "replications", "raw_file"]
FLOAT_FORMAT = "%.17g"


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / cfg.run_name


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def write_table(rows: list[dict], path: Union[str, Path]) -> None:
    df = pd.DataFrame(rows).reindex(columns=RESULT_COLUMNS)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_result(result: ExperimentResult, cfg: ExperimentConfig, out_dir: Union[str, Path, None] = None) -> Path:
    out = Path(out_dir) if out_dir is not None else output_dir(cfg)
    (out / "raw").mkdir(parents=True, exist_ok=True)

    results_csv = out / "results.csv"
    write_table(result.rows, results_csv)
    for name, rows in result.tables.items():
        write_table(rows, out / f"{name}.csv")
    for raw_file, values in result.raw.items():
        pd.DataFrame({"replication": np.arange(len(values)), "value": values}).to_csv(
            out / raw_file, index=False, float_format=FLOAT_FORMAT
        )
    pd.DataFrame(result.timings, columns=["param", "seconds"]).to_csv(out / "timing.csv", index=False)

    if result.paths:
        (out / "paths").mkdir(exist_ok=True)
        for name, states in result.paths.items():
            np.save(out / "paths" / f"{name}.npy", np.ascontiguousarray(states))

    summary = {
        "experiment": result.name,
        "version": __version__,
        "config": cfg.as_dict(),
        "summary": result.summary,
        "checks": result.checks,
        "passed": not result.failed_checks,
        "files": sorted(["results.csv", "timing.csv", *[f"{n}.csv" for n in result.tables], *result.raw]),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable))
    logger.info("wrote %s (%d rows, %d raw files)", out, len(result.rows), len(result.raw))
    return results_csv
