"""
Prediction-space x loss-space objectives and gradient instrumentation.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd

from binflow.core.flowcore import FlowSample
from binflow.core.ndmath import Tensor, as_tensor, softplus, square, tsum
from binflow.errors import DimensionError, DivergenceError, DomainError
from binflow.models import ObjectiveConfig

ArrayOrTensor = Union[Tensor, np.ndarray]


def _batch_size(tensor: Tensor) -> int:
    return tensor.shape[0] if tensor.ndim >= 2 else 1


def _same_shape(op: str, *tensors: Tensor) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"{op}: shapes differ {sorted(shapes)}")


def derive_velocity(x_pred: ArrayOrTensor, z: ArrayOrTensor, t: float,
                    epsilon_t: float = 1e-6) -> ArrayOrTensor:
    """Implied velocity (x_pred - z) / (1 - t + epsilon_t); accepts tensors or plain arrays"""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t={t} outside [0, 1]")
    denominator = 1.0 - t + epsilon_t
    if denominator <= 0.0:
        raise DivergenceError(f"implied velocity is singular at t={t} with epsilon_t={epsilon_t}")
    return (x_pred - z) * (1.0 / denominator)


def loss_v_mse_mismatched(x_pred: Tensor, x: Tensor, z: Tensor, t: float) -> Tensor:
    """Velocity-space MSE from a signal prediction: (1 - t)^-2 ||x_pred - x||^2"""
    if t >= 1.0:
        raise DivergenceError("mismatched velocity loss is singular at t = 1")
    x = as_tensor(x)
    _same_shape("loss_v_mse_mismatched", x_pred, x, as_tensor(z))
    weight = 1.0 / (1.0 - t) ** 2
    return tsum(square(x_pred - x)) * (weight / _batch_size(x))


def loss_x_mse(x_pred: Tensor, x: Tensor) -> Tensor:
    x = as_tensor(x)
    _same_shape("loss_x_mse", x_pred, x)
    return tsum(square(x_pred - x)) / _batch_size(x)


def loss_v_mse_aligned(v_pred: Tensor, x: Tensor, e: Tensor) -> Tensor:
    x, e = as_tensor(x), as_tensor(e)
    _same_shape("loss_v_mse_aligned", v_pred, x, e)
    return tsum(square(v_pred - Tensor(x.data - e.data))) / _batch_size(x)


def check_bipolar(x: np.ndarray) -> None:
    if not np.all((x == 1.0) | (x == -1.0)):
        raise DomainError("targets must be in {-1, +1}")


def loss_bce(logits: Tensor, x: Tensor) -> Tensor:
    """Factorized Bernoulli NLL on logits, softplus(a) - y a with y = (1 + x) / 2"""
    x = as_tensor(x)
    _same_shape("loss_bce", logits, x)
    check_bipolar(x.data)
    target = Tensor((1.0 + x.data) / 2.0)
    return tsum(softplus(logits) - logits * target) / _batch_size(x)


def objective_loss(objective: ObjectiveConfig, output: Tensor, sample: FlowSample) -> Tensor:
    """Training loss of a raw network output under ``objective``.

    The mismatched pairing keeps its singular weight; no epsilon guard is
    applied during loss evaluation.
    """
    pairing = (objective.prediction, objective.loss)
    if pairing == ("x_pred", "x_mse"):
        return loss_x_mse(output, sample.x)
    if pairing == ("x_pred", "v_mse"):
        return loss_v_mse_mismatched(output, sample.x, sample.z, sample.t)
    if pairing == ("x_pred", "bce"):
        return loss_bce(output, sample.x)
    if pairing == ("v_pred", "v_mse"):
        return loss_v_mse_aligned(output, sample.x, sample.e)
    # v_pred + x_mse: signal estimate recovered from the velocity
    return loss_x_mse(sample.z + output * (1.0 - sample.t), sample.x)


def signal_estimate(objective: ObjectiveConfig, output: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    """x-hat implied by a raw network output"""
    if objective.prediction == "v_pred":
        return z + (1.0 - t) * output
    if objective.loss == "bce":
        return np.tanh(output / 2.0)
    return output


def velocity_estimate(objective: ObjectiveConfig, output: np.ndarray, z: np.ndarray,
                      t: float, epsilon_t: Optional[float] = None) -> np.ndarray:
    """Velocity implied by a raw network output, guarded at t -> 1"""
    if objective.prediction == "v_pred":
        return output
    eps = objective.epsilon_t if epsilon_t is None else epsilon_t
    return derive_velocity(signal_estimate(objective, output, z, t), z, t, eps)


# ---------------------------------------------------------------------------
# Gradient instrumentation
# ---------------------------------------------------------------------------

class GradRecord(NamedTuple):
    step: int
    t: float
    loss: float
    grad_sq_norm: float


@dataclass
class GradTrace:
    """Per-step gradient second-moment records"""
    records: List[GradRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=list(GradRecord._fields))


class BinStat(NamedTuple):
    t_mid: float
    mean_grad_sq_norm: float
    count: int


def grad_sq_norm(params: Iterable[Tensor]) -> float:
    """Sum of squared gradient entries across parameters"""
    total = 0.0
    for tensor in params:
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad * tensor.grad))
    return total


def record_grad(trace: GradTrace, step: int, t: float, loss: float,
                params: Iterable[Tensor]) -> GradTrace:
    """Append the current (pre-clip) gradient second moment; call after backward"""
    trace.records.append(GradRecord(int(step), float(t), float(loss), grad_sq_norm(params)))
    return trace


def binned_second_moment(trace: GradTrace, bins: int) -> List[BinStat]:
    """Mean grad_sq_norm in equal-width t bins over [0, 1]; t = 1 joins the last bin"""
    if bins < 2:
        raise DomainError("need at least two bins")
    sums = np.zeros(bins)
    counts = np.zeros(bins, dtype=np.int64)
    for record in trace.records:
        index = min(int(math.floor(record.t * bins)), bins - 1)
        sums[index] += record.grad_sq_norm
        counts[index] += 1

    stats = []
    for k in range(bins):
        mean = sums[k] / counts[k] if counts[k] else float("nan")
        stats.append(BinStat((k + 0.5) / bins, float(mean), int(counts[k])))
    return stats


def max_to_median_ratio(stats: List[BinStat]) -> float:
    """Max over occupied bins divided by their median"""
    means = np.array([s.mean_grad_sq_norm for s in stats if s.count > 0])
    if means.size == 0:
        return float("nan")
    median = float(np.median(means))
    if median == 0:
        return float("inf") if means.max() > 0 else 1.0
    return float(means.max() / median)
