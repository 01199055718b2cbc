"""
Small numeric helpers shared by the recipes: dB conversion, log-log fits,
smoothing and Monte Carlo error bars.
"""

import time
from typing import Sequence

import numpy as np
import pandas as pd


def db_to_noise_var(snr_db):
    """Noise variance for unit received energy per symbol: sigma^2 = 10^(-snr/10)"""
    noise_var = 10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 10.0)
    return float(noise_var) if noise_var.ndim == 0 else noise_var


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs at least two strictly positive points")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first window-1 entries average what is available"""
    if window < 1:
        raise ValueError("window must be positive")
    return pd.Series(np.asarray(values, dtype=np.float64)).rolling(window, min_periods=1).mean().to_numpy()


def is_nonincreasing(values: Sequence[float], rtol: float = 0.0) -> bool:
    """True when each entry is at most the previous one, up to a relative slack"""
    values = np.asarray(values, dtype=np.float64)
    return bool(np.all(values[1:] <= values[:-1] * (1.0 + rtol)))


def monte_carlo_sigma(p: float, trials: int) -> float:
    """Binomial standard error of an estimated error rate"""
    return float(np.sqrt(max(p * (1.0 - p), 0.0) / max(trials, 1)))


def calculate_duration(start: float) -> float:
    """Elapsed wall-clock seconds since a ``time.perf_counter()`` stamp"""
    return time.perf_counter() - start
