"""
Test cases for the linear path, time samplers and Bayes oracles.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import logit

from binflow.core.flowcore import (
    build_sample, denoising_init, gaussian_bayes_residual, interpolate, logit_normal_pdf, sample_t,
    sample_t_batch, scalar_binary_mmse, snr,
)
from binflow.core.ndmath import Rng, Tensor
from binflow.errors import DimensionError, DivergenceError, DomainError
from binflow.models import TimeSampler
from binflow.utils.helpers import monte_carlo_sigma


def test_interpolate_endpoints():
    """Test t=0 gives noise, t=1 gives signal, midpoint of +1/-1 is 0"""
    x = Tensor([1.0, -1.0])
    e = Tensor([0.3, 0.7])
    assert np.array_equal(interpolate(x, e, 0.0).data, e.data)
    assert np.array_equal(interpolate(x, e, 1.0).data, x.data)
    assert interpolate(Tensor(1.0), Tensor(-1.0), 0.5).item() == 0.0


def test_interpolate_errors():
    """Test out-of-range t and shape mismatch"""
    with pytest.raises(DomainError):
        interpolate(Tensor([1.0]), Tensor([0.0]), 1.5)
    with pytest.raises(DimensionError):
        interpolate(Tensor([1.0]), Tensor([0.0, 1.0]), 0.5)


def test_build_sample_identities():
    """Test z == t x + (1 - t) e and v_target == x - e"""
    rng = Rng(3)
    x = rng.bipolar((8, 4))
    e = rng.normal((8, 4))
    sample = build_sample(x, e, 0.3)
    assert np.array_equal(sample.z.data, 0.3 * x + 0.7 * e)
    assert np.array_equal(sample.v_target.data, x - e)


def test_snr_values():
    """Test snr at 0, 0.5 and 0.9 and its singularity"""
    assert snr(0.0) == 0.0
    assert snr(0.5) == 1.0
    assert abs(snr(0.9) - 81.0) < 1e-9
    with pytest.raises(DivergenceError):
        snr(1.0)


def test_uniform_sampler_mean():
    """Test uniform draws average 0.5"""
    draws = sample_t_batch(TimeSampler(kind="uniform"), Rng(0), 1_000_000)
    assert abs(draws.mean() - 0.5) < 0.002


def test_logit_normal_sampler_location():
    """Test logit of logit-normal draws averages m"""
    sampler = TimeSampler(kind="logit_normal", m=-0.8, s=0.8)
    draws = sample_t_batch(sampler, Rng(0), 1_000_000)
    assert abs(logit(draws).mean() + 0.8) < 0.005


def test_logit_normal_histogram_matches_pdf():
    """Test bin frequencies of the sampler against the integrated density"""
    m, s = -0.8, 0.8
    count = 200_000
    draws = sample_t_batch(TimeSampler(kind="logit_normal", m=m, s=s), Rng(3), count)
    edges = np.linspace(0.05, 0.95, 19)
    observed, _ = np.histogram(draws, bins=edges)
    for k in range(len(edges) - 1):
        expected, _ = quad(lambda t: logit_normal_pdf(t, m, s), edges[k], edges[k + 1], epsabs=1e-12)
        frequency = observed[k] / count
        assert abs(frequency - expected) <= 4.0 * monte_carlo_sigma(expected, count) + 1e-4


def test_logit_normal_narrow_concentrates_at_half():
    """Test a tiny s puts every draw next to 0.5"""
    sampler = TimeSampler(kind="logit_normal", m=0.0, s=1e-6)
    rng = Rng(1)
    assert all(abs(sample_t(sampler, rng) - 0.5) < 1e-5 for _ in range(100))


def test_draws_respect_t_max():
    """Test every sampler kind stays inside [0, t_max]"""
    rng = Rng(5)
    for kind in ("uniform", "clipped", "logit_normal"):
        sampler = TimeSampler(kind=kind, m=3.0, s=2.0, t_max=0.9)
        draws = [sample_t(sampler, rng) for _ in range(2000)]
        assert min(draws) >= 0.0
        assert max(draws) <= 0.9


def test_sampler_validation():
    """Test non-positive s and out-of-range t_max are rejected"""
    with pytest.raises(ValueError):
        TimeSampler(kind="logit_normal", s=0.0)
    with pytest.raises(ValueError):
        TimeSampler(t_max=1.5)


def test_logit_normal_pdf():
    """Test peak value, symmetry and normalization"""
    assert abs(logit_normal_pdf(0.5, 0.0, 1.0) - 4.0 / math.sqrt(2 * math.pi)) < 1e-12
    assert abs(logit_normal_pdf(0.2, 0.0, 0.7) - logit_normal_pdf(0.8, 0.0, 0.7)) < 1e-12
    total, _ = quad(lambda t: logit_normal_pdf(t, -0.8, 0.8), 0.0, 1.0, epsabs=1e-12)
    assert abs(total - 1.0) < 1e-6
    with pytest.raises(DomainError):
        logit_normal_pdf(1.0, 0.0, 1.0)


def test_scalar_binary_mmse():
    """Test symmetry, vanishing-noise limit and a direct posterior value"""
    assert scalar_binary_mmse(0.0, 0.4) == 0.0
    assert abs(scalar_binary_mmse(0.3, 0.999) - 1.0) < 1e-6
    assert abs(scalar_binary_mmse(0.5, 0.5) - math.tanh(1.0)) < 1e-12


def test_scalar_binary_mmse_matches_posterior_mean():
    """Test tanh form against the two-point posterior"""
    z, t = 0.37, 0.6
    weights = [math.exp(-((z - t * x) ** 2) / (2 * (1 - t) ** 2)) for x in (-1.0, 1.0)]
    posterior_mean = (weights[1] - weights[0]) / (weights[0] + weights[1])
    assert abs(scalar_binary_mmse(z, t) - posterior_mean) < 1e-12


def test_gaussian_bayes_residual():
    """Test endpoints and the isotropic closed form"""
    assert abs(gaussian_bayes_residual(np.eye(16), 1.0)) < 1e-12
    assert abs(gaussian_bayes_residual(np.eye(4), 0.0) - 4.0) < 1e-12
    assert abs(gaussian_bayes_residual(np.eye(16), 0.5) - 8.0) < 1e-12


def test_gaussian_bayes_residual_rejects_bad_covariance():
    """Test asymmetric and indefinite matrices"""
    with pytest.raises(DomainError):
        gaussian_bayes_residual(np.array([[1.0, 0.5], [0.0, 1.0]]), 0.5)
    with pytest.raises(DomainError):
        gaussian_bayes_residual(np.array([[1.0, 0.0], [0.0, -1.0]]), 0.5)


def test_denoising_init():
    """Test pure noise at t0=0 and per-coordinate variance (1 - t0)^2"""
    prior = Tensor(np.ones((100_000, 2)))
    start = denoising_init(prior, 0.0, Rng(9))
    assert np.array_equal(start.data, Rng(9).normal((100_000, 2)))

    start = denoising_init(prior, 0.7, Rng(9))
    assert np.allclose(start.data.var(axis=0), 0.09, rtol=0.02)
    assert np.allclose(start.data.mean(axis=0), 0.7, atol=0.005)
    with pytest.raises(DomainError):
        denoising_init(prior, 1.0, Rng(9))
