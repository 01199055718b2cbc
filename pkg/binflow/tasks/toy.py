"""
Low-dimensional stability study: every (prediction, loss, sampler) cell on
i.i.d. Gaussian or BPSK data, with gradient traces and denoising BER.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from binflow.core.engine import TrainResult, train
from binflow.core.ndmath import Rng
from binflow.core.nets import GatedMlp, save_params
from binflow.core.objectives import BinStat, binned_second_moment
from binflow.core.sampler import ber, euler_sample
from binflow.core.tables import (
    TOY_BER_COLUMNS, create_run_summary, summarize_cell, summary_frame, t_histogram,
    write_binned, write_frame, write_history, write_trace,
)
from binflow.errors import IntegrationDivergenceError
from binflow.models import MlpConfig, ObjectiveConfig, SampleConfig, TimeSampler, ToyRecipe, TrainConfig

logger = logging.getLogger(__name__)


class GaussianSource:
    """x ~ N(0, I_D)"""

    def __init__(self, dim: int):
        self.dim = dim

    def sample(self, rng: Rng, batch: int) -> Tuple[np.ndarray, None]:
        return rng.normal((batch, self.dim)), None


class BpskSource:
    """x uniform on {-1, +1}^D"""

    def __init__(self, dim: int):
        self.dim = dim

    def sample(self, rng: Rng, batch: int) -> Tuple[np.ndarray, None]:
        return rng.bipolar((batch, self.dim)), None


def make_source(recipe: ToyRecipe):
    return BpskSource(recipe.D) if recipe.data_kind == "bpsk_iid" else GaussianSource(recipe.D)


def mmse_reference_ber(t0: float) -> float:
    """BER of sign(z_t0) = sign(E[x | z_t0]) for a uniform +-1 symbol: Q(t0 / (1 - t0))"""
    return float(norm.sf(t0 / (1.0 - t0)))


def cell_name(objective: ObjectiveConfig, sampler: TimeSampler) -> str:
    return f"{objective.name}__{sampler.kind}"


@dataclass
class ToyCell:
    name: str
    result: TrainResult
    binned: List[BinStat]
    ber_table: Optional[pd.DataFrame] = None


@dataclass
class ToyRun:
    cells: Dict[str, ToyCell] = field(default_factory=dict)
    summary: Optional[pd.DataFrame] = None
    outputs: List[Path] = field(default_factory=list)

    @property
    def divergence_events(self):
        return {name: cell.result.divergence for name, cell in self.cells.items()
                if cell.result.divergence is not None}


def ber_vs_t0(model: GatedMlp, objective: ObjectiveConfig, recipe: ToyRecipe,
              result: TrainResult, rng: Rng) -> pd.DataFrame:
    """
    Denoising BER of the learned flow from each t0, next to the MMSE reference.

    Args:
        model: trained network
        objective: objective the network was trained with
        recipe: supplies the t0 grid, Euler steps and bit budget
        result: training result whose evaluation params are used
        rng: evaluation randomness

    Returns:
        Frame with columns t0, ber, reference_ber, bit_count
    """
    rows_per_point = math.ceil(recipe.ber_bits / recipe.D)
    params = result.evaluation_params()
    rows = []
    for k, t0 in enumerate(recipe.t0_grid):
        point_rng = rng.derive(k)
        x = point_rng.bipolar((rows_per_point, recipe.D))
        config = SampleConfig(steps=recipe.euler_steps, t0=t0, hard_threshold=True)
        try:
            x_hat = euler_sample(model, objective, config, rng=point_rng, prior=x, params=params)
            error_rate = ber(x_hat, x)
        except IntegrationDivergenceError as exc:
            logger.warning("denoising from t0=%g failed: %s", t0, exc)
            error_rate = float("nan")
        rows.append((float(t0), error_rate, mmse_reference_ber(t0), x.size))
    return pd.DataFrame(rows, columns=TOY_BER_COLUMNS)


def run_cell(recipe: ToyRecipe, objective: ObjectiveConfig, sampler: TimeSampler) -> ToyCell:
    name = cell_name(objective, sampler)
    mlp = MlpConfig(in_dim=recipe.D, out_dim=recipe.D, hidden=recipe.hidden,
                    layers=recipe.layers, embed_dim=recipe.embed_dim)
    model = GatedMlp(mlp, rng=Rng(recipe.seed).derive(1))
    config = TrainConfig(lr=recipe.lr, steps=recipe.steps, batch=recipe.batch,
                         grad_clip=recipe.grad_clip, seed=recipe.seed, sampler=sampler,
                         objective=objective, progress=recipe.progress)
    result = train(config, model, make_source(recipe), label=name)

    ber_table = None
    if recipe.data_kind == "bpsk_iid":
        ber_table = ber_vs_t0(model, objective, recipe, result, Rng(recipe.seed).derive(2))
    return ToyCell(name=name, result=result, binned=binned_second_moment(result.trace, recipe.bins),
                   ber_table=ber_table)


def run_toy(recipe: ToyRecipe, out_dir: Optional[Path] = None) -> ToyRun:
    """Train every objective x sampler cell and write its tables under ``out_dir/<cell>/``"""
    run = ToyRun()
    summary_rows = []
    for objective in recipe.objectives:
        for sampler in recipe.samplers:
            cell = run_cell(recipe, objective, sampler)
            run.cells[cell.name] = cell
            summary_rows.append(summarize_cell(cell.name, cell.result, recipe.bins))
            if out_dir is not None:
                run.outputs.extend(write_cell(cell, Path(out_dir) / cell.name, recipe.bins))

    run.summary = summary_frame(summary_rows)
    logger.info("toy summary: %s", create_run_summary(run.summary))
    if out_dir is not None:
        run.outputs.append(write_frame(run.summary, Path(out_dir) / "summary.csv"))
    return run


def write_cell(cell: ToyCell, cell_dir: Path, bins: int) -> List[Path]:
    times = [record.t for record in cell.result.trace.records]
    outputs = [
        write_trace(cell.result.trace, cell_dir / "trace.csv"),
        write_history(cell.result, cell_dir / "history.csv"),
        write_binned(cell.binned, cell_dir / "binned.csv"),
        write_frame(t_histogram(times, bins), cell_dir / "t_hist.csv"),
        save_params(cell.result.params, cell_dir / "params.bnfm"),
    ]
    if cell.ber_table is not None:
        outputs.append(write_frame(cell.ber_table, cell_dir / "ber_t0.csv"))
    return outputs
