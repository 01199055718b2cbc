"""
Adam optimizer, gradient clipping and the flow-matching training loop.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from binflow.core.flowcore import build_sample, sample_t
from binflow.core.ndmath import Rng, Tape, backward
from binflow.core.nets import GatedMlp, Params, save_params
from binflow.core.objectives import GradTrace, grad_sq_norm, objective_loss, record_grad
from binflow.errors import NonFiniteGradientError
from binflow.models import DivergenceEvent, ObjectiveConfig, TimeSampler, TrainConfig

logger = logging.getLogger(__name__)


class DataSource(Protocol):
    """Deterministic batch provider: the same rng state yields the same batch"""
    dim: int

    def sample(self, rng: Rng, batch: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        ...


@dataclass
class ValidationSet:
    """Fixed (x, e, cond) draws so validation losses are comparable across checkpoints"""
    x: np.ndarray
    e: np.ndarray
    cond: Optional[np.ndarray] = None

    @classmethod
    def draw(cls, source: DataSource, rng: Rng, size: int) -> "ValidationSet":
        x, cond = source.sample(rng, size)
        return cls(x=x, e=rng.normal(x.shape), cond=cond)


class LossRecord(NamedTuple):
    step: int
    loss: float
    pre_clip_grad_norm: float
    t: float


class ValidationRecord(NamedTuple):
    step: int
    mean_loss: float


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


@dataclass
class TrainResult:
    params: Params
    trace: GradTrace
    history: List[LossRecord]
    divergence: Optional[DivergenceEvent] = None
    validation: List[ValidationRecord] = field(default_factory=list)
    best_params: Optional[Params] = None
    best_step: Optional[int] = None
    objective: Optional[ObjectiveConfig] = None
    sampler: Optional[TimeSampler] = None

    @property
    def completed_steps(self) -> int:
        return len(self.history)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=list(LossRecord._fields))

    def evaluation_params(self) -> Params:
        """Best validated checkpoint if one exists, else the final params"""
        return self.best_params if self.best_params is not None else self.params


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns the (possibly) scaled gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update (decoupled weight decay when configured)"""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(state.step_count, name)
    if config.grad_clip is not None:
        grads, _ = clip_global_norm(grads, config.grad_clip)

    state.step_count += 1
    correction1 = 1.0 - config.beta1 ** state.step_count
    correction2 = 1.0 - config.beta2 ** state.step_count
    for name, tensor in params.items():
        grad = grads[name]
        state.m[name] = config.beta1 * state.m[name] + (1.0 - config.beta1) * grad
        state.v[name] = config.beta2 * state.v[name] + (1.0 - config.beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        data = tensor.data
        if config.weight_decay:
            data = data - config.lr * config.weight_decay * data
        tensor.data = data - config.lr * m_hat / (np.sqrt(v_hat) + config.eps_adam)
    return params, state


def validate(params: Params, model: GatedMlp, objective: ObjectiveConfig,
             val_source: ValidationSet, t_grid: Sequence[float]) -> pd.DataFrame:
    """Objective loss on the fixed validation draws at each t, without recording gradients"""
    rows = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in t_grid:
            sample = build_sample(val_source.x, val_source.e, t)
            output = model.forward(sample.z, t, val_source.cond, params=params)
            rows.append((float(t), objective_loss(objective, output, sample).item()))
    return pd.DataFrame(rows, columns=["t", "loss"])


def validation_spread(records: Sequence[ValidationRecord]) -> float:
    """log10(max / min) of the periodic validation losses"""
    losses = np.array([r.mean_loss for r in records if np.isfinite(r.mean_loss) and r.mean_loss > 0])
    if losses.size < 2:
        return 0.0
    return float(np.log10(losses.max() / losses.min()))


def gradient_spike(previous: Sequence[float], sq_norm: float, ratio: Optional[float], warmup: int) -> bool:
    """True when ``sq_norm`` exceeds ``ratio`` times the median of the earlier steps.

    Needs at least ``warmup`` earlier steps; ``ratio=None`` disables the check.
    """
    if ratio is None or len(previous) < max(warmup, 1):
        return False
    median = float(np.median(previous))
    return median > 0 and sq_norm > ratio * median


def train(config: TrainConfig, model: GatedMlp, data_source: DataSource,
          val_source: Optional[ValidationSet] = None,
          checkpoint_dir: Optional[Path] = None, label: str = "train") -> TrainResult:
    """Flow-matching training loop.

    Per step: draw t, draw the data batch and fresh noise, build the sample,
    forward, objective loss, backward, record the pre-clip gradient moment,
    then clip (inside ``adam_step``) and update. A non-finite loss, a gradient
    second moment above ``divergence_threshold``, or one more than
    ``divergence_ratio`` times the running median of earlier steps halts the
    loop and is returned as a ``DivergenceEvent`` with the traces intact.
    """
    rng = Rng(config.seed)
    params = model.params
    state = AdamState.zeros_like(params)
    result = TrainResult(params=params, trace=GradTrace(), history=[],
                         objective=config.objective, sampler=config.sampler)
    best_loss = math.inf
    previous: List[float] = []

    if config.sampler.t_max < 1.0:
        logger.info("%s: training times clipped at t_max=%g", label, config.sampler.t_max)
    logger.info("%s: %s, sampler %s, %d steps", label, config.objective.name,
                config.sampler.label, config.steps)

    for step in tqdm(range(config.steps), desc=label, disable=not config.progress):
        t = sample_t(config.sampler, rng)
        x, cond = data_source.sample(rng, config.batch)
        sample = build_sample(x, rng.normal(x.shape), t)

        params.zero_grad()
        with np.errstate(over="ignore", invalid="ignore"):
            with Tape() as tape:
                output = model.forward(sample.z, t, cond)
                loss = objective_loss(config.objective, output, sample)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                result.divergence = DivergenceEvent(step=step, reason="non_finite_loss", loss=loss_value)
                break
            backward(loss, tape)

        grads = params.grads()
        sq_norm = grad_sq_norm(params.values())
        if not math.isfinite(sq_norm) or sq_norm > config.divergence_threshold:
            result.divergence = DivergenceEvent(step=step, reason="gradient_overflow",
                                                loss=loss_value, grad_sq_norm=sq_norm)
            break
        if gradient_spike(previous, sq_norm, config.divergence_ratio, config.divergence_warmup):
            result.divergence = DivergenceEvent(step=step, reason="gradient_spike",
                                                loss=loss_value, grad_sq_norm=sq_norm)
            break
        previous.append(sq_norm)

        record_grad(result.trace, step, t, loss_value, params.values())
        adam_step(params, grads, state, config)
        params.check_finite(step)
        result.history.append(LossRecord(step, loss_value, math.sqrt(sq_norm), t))

        if step % config.log_every == 0:
            logger.debug("%s step %d t=%.4f loss=%.6g |g|^2=%.6g", label, step, t, loss_value, sq_norm)

        completed = step + 1
        if val_source is not None and config.validate_every and completed % config.validate_every == 0:
            table = validate(params, model, config.objective, val_source, config.validation_t_grid)
            mean_loss = float(table["loss"].mean())
            result.validation.append(ValidationRecord(completed, mean_loss))
            if math.isfinite(mean_loss) and mean_loss < best_loss:
                best_loss = mean_loss
                result.best_params = params.snapshot()
                result.best_step = completed
                if checkpoint_dir is not None:
                    save_params(result.best_params, Path(checkpoint_dir) / "best.bnfm")

        if checkpoint_dir is not None and config.checkpoint_every and completed % config.checkpoint_every == 0:
            save_params(params, Path(checkpoint_dir) / f"step_{completed:06d}.bnfm")

    if result.divergence is not None:
        logger.warning("%s: divergence at step %d (%s)", label, result.divergence.step,
                       result.divergence.reason)
    logger.info("%s: finished %d/%d steps", label, result.completed_steps, config.steps)
    return result
