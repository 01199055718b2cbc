"""
Tabular outputs: gradient traces, loss histories, binned moments, BER tables
and per-cell summaries, written as plot-ready CSV.
"""

from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from binflow.core.engine import TrainResult
from binflow.core.objectives import BinStat, GradTrace, binned_second_moment, max_to_median_ratio
from binflow.utils.helpers import smooth

FLOAT_FORMAT = "%.17g"

BER_COLUMNS = ["snr_db", "detector", "ber", "bit_count"]
TOY_BER_COLUMNS = ["t0", "ber", "reference_ber", "bit_count"]
SUMMARY_COLUMNS = [
    "cell", "objective", "sampler", "aligned", "status", "completed_steps", "diverged_step",
    "divergence_reason", "grad_ratio", "final_smoothed_loss",
]

PathLike = Union[str, Path]


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write a frame without index; floats round-trip exactly"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_trace(trace: GradTrace, path: PathLike) -> Path:
    return write_frame(trace.to_frame(), path)


def write_history(result: TrainResult, path: PathLike) -> Path:
    return write_frame(result.history_frame(), path)


def binned_frame(stats: Sequence[BinStat]) -> pd.DataFrame:
    return pd.DataFrame(list(stats), columns=list(BinStat._fields))


def write_binned(stats: Sequence[BinStat], path: PathLike) -> Path:
    return write_frame(binned_frame(stats), path)


def t_histogram(times: Sequence[float], bins: int) -> pd.DataFrame:
    """Counts of drawn training times in equal-width bins over [0, 1]"""
    counts, edges = np.histogram(np.asarray(times, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return pd.DataFrame({"t_mid": 0.5 * (edges[:-1] + edges[1:]), "count": counts})


def ber_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    """
    Build a BER-vs-SNR table.

    Args:
        rows: dicts with snr_db, detector, ber, bit_count

    Returns:
        Frame sorted by detector then SNR
    """
    frame = pd.DataFrame(rows, columns=BER_COLUMNS)
    frame["bit_count"] = frame["bit_count"].astype(np.int64)
    return frame.sort_values(["detector", "snr_db"], kind="mergesort").reset_index(drop=True)


def summarize_cell(cell: str, result: TrainResult, bins: int = 20,
                   smoothing: int = 50) -> Dict[str, Any]:
    """One summary row for a trained (objective, sampler) cell"""
    objective = result.objective
    sampler = result.sampler
    losses = [record.loss for record in result.history]
    final_loss = float(smooth(losses, smoothing)[-1]) if losses else float("nan")
    ratio = max_to_median_ratio(binned_second_moment(result.trace, bins)) if len(result.trace) else float("nan")
    divergence = result.divergence
    return {
        "cell": cell,
        "objective": objective.name if objective is not None else "",
        "sampler": sampler.label if sampler is not None else "",
        "aligned": bool(objective.aligned) if objective is not None else False,
        "status": "DIVERGED" if divergence is not None else "COMPLETED",
        "completed_steps": result.completed_steps,
        "diverged_step": divergence.step if divergence is not None else None,
        "divergence_reason": divergence.reason if divergence is not None else None,
        "grad_ratio": ratio,
        "final_smoothed_loss": final_loss,
    }


def summary_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def create_run_summary(summary: pd.DataFrame) -> Dict[str, Any]:
    """
    Aggregate statistics over all cells of a recipe run.

    Args:
        summary: frame produced by ``summary_frame``

    Returns:
        Summary statistics dictionary
    """
    total_cells = len(summary)
    diverged = summary[summary["status"] == "DIVERGED"]
    report: Dict[str, Any] = {
        "total_cells": total_cells,
        "completed_cells": total_cells - len(diverged),
        "diverged_cells": len(diverged),
        "diverged": diverged["cell"].tolist(),
    }
    completed = summary[summary["status"] == "COMPLETED"]
    if len(completed) > 0:
        report["worst_grad_ratio_cell"] = str(completed.loc[completed["grad_ratio"].idxmax(), "cell"]) \
            if completed["grad_ratio"].notna().any() else None
    return report
