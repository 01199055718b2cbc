"""
Linear probability path, time samplers and closed-form Bayes oracles.
"""

import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import expit, logit

from binflow.core.ndmath import Rng, Tensor, as_tensor
from binflow.errors import DimensionError, DivergenceError, DomainError
from binflow.models import TimeSampler

logger = logging.getLogger(__name__)

ArrayOrFloat = Union[float, np.ndarray]


@dataclass(frozen=True)
class FlowSample:
    """One training tuple on the linear path"""
    x: Tensor
    e: Tensor
    t: float
    z: Tensor
    v_target: Tensor


def _check_unit(t: float, name: str = "t") -> None:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"{name}={t} outside [0, 1]")


def interpolate(x: Tensor, e: Tensor, t: float) -> Tensor:
    """z_t = t x + (1 - t) e"""
    _check_unit(t)
    x, e = as_tensor(x), as_tensor(e)
    if x.shape != e.shape:
        raise DimensionError(f"interpolate: {x.shape} vs {e.shape}")
    return Tensor(t * x.data + (1.0 - t) * e.data)


def build_sample(x: np.ndarray, e: np.ndarray, t: float) -> FlowSample:
    x_t, e_t = Tensor(x), Tensor(e)
    return FlowSample(x=x_t, e=e_t, t=float(t), z=interpolate(x_t, e_t, t),
                      v_target=Tensor(x_t.data - e_t.data))


def snr(t: float) -> float:
    """Instantaneous signal-to-noise ratio t^2 / (1 - t)^2"""
    if t == 1.0:
        raise DivergenceError("snr diverges at t = 1")
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t={t} outside [0, 1)")
    return t * t / ((1.0 - t) ** 2)


def sample_t_batch(sampler: TimeSampler, rng: Rng, count: int) -> np.ndarray:
    """``count`` training times from ``sampler``; every draw lies in [0, t_max]"""
    if sampler.kind == "uniform":
        return rng.uniform(count) * sampler.t_max
    if sampler.kind == "clipped":
        return np.minimum(rng.uniform(count), sampler.t_max)
    return np.minimum(expit(sampler.m + sampler.s * rng.normal(count)), sampler.t_max)


def sample_t(sampler: TimeSampler, rng: Rng) -> float:
    """One training time, drawn from the same stream layout as ``sample_t_batch``"""
    return float(sample_t_batch(sampler, rng, 1)[0])


def logit_normal_pdf(t: ArrayOrFloat, m: float, s: float) -> ArrayOrFloat:
    """Density of t = sigmoid(u), u ~ N(m, s^2)"""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr <= 0) | (t_arr >= 1)):
        raise DomainError("logit-normal density is defined on (0, 1)")
    u = logit(t_arr)
    density = np.exp(-((u - m) ** 2) / (2 * s * s)) / (s * math.sqrt(2 * math.pi) * t_arr * (1 - t_arr))
    return float(density) if density.ndim == 0 else density


def scalar_binary_mmse(z: ArrayOrFloat, t: float) -> ArrayOrFloat:
    """E[x | z_t = z] for x uniform on {-1, +1} and standard normal noise"""
    if not 0.0 < t < 1.0:
        raise DomainError(f"t={t} outside (0, 1)")
    estimate = np.tanh(t * np.asarray(z, dtype=np.float64) / (1.0 - t) ** 2)
    return float(estimate) if estimate.ndim == 0 else estimate


def gaussian_bayes_residual(sigma: np.ndarray, t: float) -> float:
    """Tr(S - t^2 S (t^2 S + (1 - t)^2 I)^-1 S) for x ~ N(0, S)"""
    _check_unit(t)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DomainError("covariance must be square")
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
        raise DomainError("covariance must be symmetric")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance must be positive definite") from exc

    dim = sigma.shape[0]
    system = t * t * sigma + (1.0 - t) ** 2 * np.eye(dim)
    explained = t * t * sigma @ np.linalg.solve(system, sigma)
    return float(np.trace(sigma - explained))


def denoising_init(x_prior: Tensor, t0: float, rng: Rng) -> Tensor:
    """Start the flow at t0 from a prior estimate with fresh noise"""
    if not 0.0 <= t0 < 1.0:
        raise DomainError(f"t0={t0} outside [0, 1)")
    x_prior = as_tensor(x_prior)
    return interpolate(x_prior, Tensor(rng.normal(x_prior.shape)), t0)
