"""
Real-valued MIMO detection: instance generation, classical ZF / LMMSE / MAP
baselines, conditional flow detectors and the BER-vs-SNR harness.

Channels are normalized so the received signal has unit energy per symbol,
hence SNR(dB) = -10 log10(sigma^2).
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from binflow.core.engine import TrainResult, ValidationRecord, ValidationSet, train
from binflow.core.ndmath import Rng
from binflow.core.nets import GatedMlp, Params
from binflow.core.sampler import euler_sample
from binflow.core.tables import (
    ber_frame, create_run_summary, summarize_cell, summary_frame, write_frame, write_history, write_trace,
)
from binflow.errors import DomainError, IntegrationDivergenceError
from binflow.models import MimoConfig, MlpConfig, ObjectiveConfig, SampleConfig, TimeSampler, TrainConfig
from binflow.utils.helpers import db_to_noise_var, monte_carlo_sigma

logger = logging.getLogger(__name__)

MAP_MAX_DIM = 16
ZF_RIDGE = 1e-12
ZF_COND_LIMIT = 1e12
MAP_CHUNK_ENTRIES = 4_000_000


@dataclass
class MimoInstance:
    """y = H x + n with n ~ N(0, noise_var I)"""
    H: np.ndarray
    x: np.ndarray
    noise_var: float
    y: np.ndarray


@dataclass
class MimoBatch:
    """Stacked instances: H (count, M, M), x and y (count, M), noise_var (count,)"""
    H: np.ndarray
    x: np.ndarray
    noise_var: np.ndarray
    y: np.ndarray

    @property
    def count(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def instances(self) -> List[MimoInstance]:
        return [MimoInstance(self.H[k], self.x[k], float(self.noise_var[k]), self.y[k])
                for k in range(self.count)]

    @classmethod
    def stack(cls, instances: Sequence[MimoInstance]) -> "MimoBatch":
        return cls(
            H=np.stack([inst.H for inst in instances]),
            x=np.stack([inst.x for inst in instances]),
            noise_var=np.array([inst.noise_var for inst in instances], dtype=np.float64),
            y=np.stack([inst.y for inst in instances]),
        )


Detectable = Union[MimoInstance, MimoBatch]


def _as_batch(data: Detectable) -> Tuple[MimoBatch, bool]:
    if isinstance(data, MimoInstance):
        return MimoBatch.stack([data]), True
    return data, False


def _draw(rng: Rng, N: int, noise_var: np.ndarray) -> MimoBatch:
    if N < 1:
        raise DomainError("N must be at least 1")
    count = noise_var.shape[0]
    if count < 1:
        raise DomainError("count must be at least 1")
    dim = 2 * N
    H = rng.normal((count, dim, dim)) * math.sqrt(1.0 / dim)
    x = rng.bipolar((count, dim))
    noise = rng.normal((count, dim)) * np.sqrt(noise_var)[:, None]
    y = np.einsum("bij,bj->bi", H, x) + noise
    return MimoBatch(H=H, x=x, noise_var=noise_var, y=y)


def gen_mimo_batch(rng: Rng, N: int, snr_db: Union[float, np.ndarray], count: int) -> MimoBatch:
    """Vectorized generator; ``snr_db`` is a scalar or one value per instance"""
    snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), (count,))
    return _draw(rng, N, db_to_noise_var(snr))


def gen_mimo(rng: Rng, N: int, snr_db: float, count: int) -> List[MimoInstance]:
    """``count`` instances of a 2N x 2N real system at ``snr_db``"""
    return gen_mimo_batch(rng, N, snr_db, count).instances()


def _decide(estimate: np.ndarray) -> np.ndarray:
    return np.where(estimate >= 0, 1.0, -1.0)


def _gram(batch: MimoBatch) -> Tuple[np.ndarray, np.ndarray]:
    Ht = np.transpose(batch.H, (0, 2, 1))
    return Ht @ batch.H, np.einsum("bij,bj->bi", Ht, batch.y)


def _finish(bits: np.ndarray, single: bool) -> np.ndarray:
    return bits[0] if single else bits


def detect_zf_flagged(data: Detectable) -> Tuple[np.ndarray, np.ndarray]:
    """ZF decisions plus a per-instance mask of channels that needed the ridge fallback"""
    batch, single = _as_batch(data)
    gram, rhs = _gram(batch)
    singular = np.linalg.cond(batch.H) > ZF_COND_LIMIT
    if np.any(singular):
        logger.warning("zf: %d of %d channels singular, using ridge %g", int(singular.sum()),
                       batch.count, ZF_RIDGE)
        gram = gram + singular[:, None, None] * ZF_RIDGE * np.eye(batch.dim)
    estimate = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return _finish(_decide(estimate), single), _finish(singular, single)


def detect_zf(data: Detectable) -> np.ndarray:
    """sign(pinv(H) y); ill-conditioned channels fall back to a 1e-12 ridge"""
    return detect_zf_flagged(data)[0]


def detect_lmmse(data: Detectable) -> np.ndarray:
    """sign((H^T H + sigma^2 I)^-1 H^T y)"""
    batch, single = _as_batch(data)
    gram, rhs = _gram(batch)
    gram = gram + batch.noise_var[:, None, None] * np.eye(batch.dim)
    estimate = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return _finish(_decide(estimate), single)


def candidate_table(dim: int) -> np.ndarray:
    """All 2^dim bipolar vectors, one per row"""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=dim)))


def detect_map(data: Detectable) -> np.ndarray:
    """Exhaustive argmin over x in {-1, +1}^2N of ||y - H x||^2"""
    batch, single = _as_batch(data)
    if batch.dim > MAP_MAX_DIM:
        raise DomainError(f"MAP search over 2^{batch.dim} candidates exceeds the 2^{MAP_MAX_DIM} limit")
    candidates = candidate_table(batch.dim)
    chunk = max(1, MAP_CHUNK_ENTRIES // (candidates.shape[0] * batch.dim))
    bits = np.empty_like(batch.x)
    for start in range(0, batch.count, chunk):
        stop = min(start + chunk, batch.count)
        predicted = np.einsum("bij,kj->bki", batch.H[start:stop], candidates)
        residual = np.sum((batch.y[start:stop, None, :] - predicted) ** 2, axis=-1)
        bits[start:stop] = candidates[np.argmin(residual, axis=1)]
    return _finish(bits, single)


CLASSICAL_DETECTORS: Dict[str, Callable[[Detectable], np.ndarray]] = {
    "zf": detect_zf,
    "lmmse": detect_lmmse,
    "map": detect_map,
}


def condition_vector(batch: MimoBatch) -> np.ndarray:
    """[vec(H), y, sigma^2] per instance"""
    return np.concatenate([batch.H.reshape(batch.count, -1), batch.y, batch.noise_var[:, None]], axis=1)


def condition_width(N: int) -> int:
    dim = 2 * N
    return dim * dim + dim + 1


class MimoSource:
    """Training draws with SNR uniform over the sweep range; x is the target, (H, y, sigma^2) the condition"""

    def __init__(self, N: int, snr_range: Tuple[float, float]):
        self.N = N
        self.snr_range = snr_range
        self.dim = 2 * N

    def sample(self, rng: Rng, batch: int) -> Tuple[np.ndarray, np.ndarray]:
        low, high = self.snr_range
        snr = low + (high - low) * rng.uniform(batch)
        draw = gen_mimo_batch(rng, self.N, snr, batch)
        return draw.x, condition_vector(draw)


def flow_detector(model: GatedMlp, objective: ObjectiveConfig, params: Params, steps: int,
                  rng: Rng) -> Callable[[MimoBatch], np.ndarray]:
    """Conditional Euler sampler with hard decisions, usable in ``ber_sweep``"""
    config = SampleConfig(steps=steps, hard_threshold=True)

    def detect(batch: MimoBatch) -> np.ndarray:
        try:
            return euler_sample(model, objective, config, cond=condition_vector(batch), rng=rng,
                                batch=batch.count, params=params).data
        except IntegrationDivergenceError as exc:
            logger.warning("%s: sampling failed: %s", objective.name, exc)
            return np.zeros_like(batch.x)

    return detect


def ber_sweep(detectors: Dict[str, Callable[[MimoBatch], np.ndarray]], N: int,
              snr_sweep: Sequence[float], bits_per_point: int, rng: Rng) -> pd.DataFrame:
    """
    Monte Carlo BER of every detector at every SNR point.

    All detectors see the same instances at a given SNR.

    Args:
        detectors: name -> function from a batch to +-1 decisions
        N: system size (2N real dimensions)
        snr_sweep: SNR points in dB
        bits_per_point: minimum number of bits per point and detector
        rng: evaluation randomness

    Returns:
        BER table with columns snr_db, detector, ber, bit_count
    """
    dim = 2 * N
    count = math.ceil(bits_per_point / dim)
    rows = []
    for k, snr_db in enumerate(snr_sweep):
        batch = gen_mimo_batch(rng.derive(k), N, snr_db, count)
        for name, detect in detectors.items():
            bits = detect(batch)
            rows.append({
                "snr_db": float(snr_db),
                "detector": name,
                "ber": float(np.mean(bits != batch.x)),
                "bit_count": batch.x.size,
            })
        logger.debug("snr %.1f dB: %s", snr_db,
                     {r["detector"]: r["ber"] for r in rows if r["snr_db"] == float(snr_db)})
    return ber_frame(rows)


def monotone_in_snr(table: pd.DataFrame, detector: str, sigmas: float = 2.0) -> bool:
    """BER never rises with SNR by more than ``sigmas`` Monte Carlo standard errors"""
    rows = table[table["detector"] == detector].sort_values("snr_db")
    ber_values = rows["ber"].to_numpy()
    bits = rows["bit_count"].to_numpy()
    for k in range(1, len(ber_values)):
        slack = sigmas * monte_carlo_sigma(ber_values[k - 1], int(bits[k - 1]))
        if ber_values[k] > ber_values[k - 1] + slack:
            return False
    return True


def ordering_violations(table: pd.DataFrame, order: Sequence[str], sigmas: float = 2.0) -> List[str]:
    """SNR points where a detector listed earlier in ``order`` loses to a later one beyond the slack"""
    pivot = table.pivot(index="snr_db", columns="detector", values="ber")
    bits = table.pivot(index="snr_db", columns="detector", values="bit_count")
    present = [name for name in order if name in pivot.columns]
    violations = []
    for snr_db in pivot.index:
        for better, worse in zip(present, present[1:]):
            slack = sigmas * monte_carlo_sigma(pivot.at[snr_db, worse], int(bits.at[snr_db, worse]))
            if pivot.at[snr_db, better] > pivot.at[snr_db, worse] + slack:
                violations.append(f"{better} > {worse} at {snr_db:g} dB")
    return violations


def sweep_checks(table: pd.DataFrame) -> List[str]:
    """Consistency problems in a BER sweep of the classical detectors"""
    problems = ordering_violations(table, ["map", "lmmse", "zf"])
    for name in CLASSICAL_DETECTORS:
        if name in set(table["detector"]) and not monotone_in_snr(table, name):
            problems.append(f"{name} BER rises with SNR")
    return problems


@dataclass
class MimoCell:
    name: str
    objective: ObjectiveConfig
    model: GatedMlp
    result: TrainResult


@dataclass
class MimoRun:
    cells: Dict[str, MimoCell] = field(default_factory=dict)
    ber_table: Optional[pd.DataFrame] = None
    summary: Optional[pd.DataFrame] = None
    outputs: List[Path] = field(default_factory=list)
    sweep_problems: List[str] = field(default_factory=list)

    @property
    def divergence_events(self):
        return {name: cell.result.divergence for name, cell in self.cells.items()
                if cell.result.divergence is not None}


def train_mimo_cell(config: MimoConfig, objective: ObjectiveConfig,
                    checkpoint_dir: Optional[Path] = None) -> MimoCell:
    name = objective.name
    source = MimoSource(config.n, config.train_snr_range)
    mlp = MlpConfig(in_dim=source.dim, out_dim=source.dim, hidden=config.hidden, layers=config.layers,
                    embed_dim=config.embed_dim, cond_vec_dim=condition_width(config.n))
    model = GatedMlp(mlp, rng=Rng(config.seed).derive(1))
    train_config = TrainConfig(
        lr=config.lr, weight_decay=config.weight_decay, steps=config.steps, batch=config.batch,
        grad_clip=config.grad_clip, seed=config.seed, objective=objective,
        sampler=TimeSampler(kind="clipped", t_max=config.t_max),
        validate_every=config.validate_every, progress=config.progress,
    )
    val_set = ValidationSet.draw(source, Rng(config.seed).derive(3), 1000)
    result = train(train_config, model, source, val_source=val_set, checkpoint_dir=checkpoint_dir, label=name)
    return MimoCell(name=name, objective=objective, model=model, result=result)


def run_mimo(config: MimoConfig, out_dir: Optional[Path] = None) -> MimoRun:
    """Train every objective cell, then sweep SNR with the classical baselines alongside"""
    run = MimoRun()
    summary_rows = []
    for objective in config.objectives:
        cell_dir = Path(out_dir) / objective.name if out_dir is not None else None
        cell = train_mimo_cell(config, objective, cell_dir)
        run.cells[cell.name] = cell
        summary_rows.append(summarize_cell(cell.name, cell.result))
        if cell_dir is not None:
            run.outputs.extend(write_mimo_cell(cell, cell_dir))

    detectors = {name: detect for name, detect in CLASSICAL_DETECTORS.items()
                 if name != "map" or config.map_enabled}
    for k, cell in enumerate(run.cells.values()):
        detectors[cell.name] = flow_detector(cell.model, cell.objective, cell.result.evaluation_params(),
                                             config.euler_steps, Rng(config.seed).derive(5, k))

    run.ber_table = ber_sweep(detectors, config.n, config.snr_sweep, config.bits_per_point,
                              Rng(config.seed).derive(6))
    run.sweep_problems = sweep_checks(run.ber_table)
    for problem in run.sweep_problems:
        logger.warning("ber sweep: %s", problem)
    run.summary = summary_frame(summary_rows)
    logger.info("mimo summary: %s", create_run_summary(run.summary))
    if out_dir is not None:
        run.outputs.append(write_frame(run.ber_table, Path(out_dir) / "ber.csv"))
        run.outputs.append(write_frame(run.summary, Path(out_dir) / "summary.csv"))
    return run


def write_mimo_cell(cell: MimoCell, cell_dir: Path) -> List[Path]:
    validation = pd.DataFrame(cell.result.validation, columns=list(ValidationRecord._fields))
    outputs = [
        write_trace(cell.result.trace, cell_dir / "trace.csv"),
        write_history(cell.result, cell_dir / "history.csv"),
        write_frame(validation, cell_dir / "validation.csv"),
    ]
    if cell.result.best_step is not None:
        outputs.append(cell_dir / "best.bnfm")
    return outputs
