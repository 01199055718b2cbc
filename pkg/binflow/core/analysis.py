"""
Numerical verification of the mismatch singularity and of its suppression
by logit-normal time sampling, independent of any trained network.

The gradient second moment of the mismatched objective is bounded below by
``4c / (1 - t)^4 * R(t)``. ``R`` is the Bayes residual of a Gaussian prior
(continuous case, vanishing like (1 - t)^2) or a constant floor
``eps_resid_sq`` (binary case).
"""

import math
from typing import Literal, NamedTuple, Optional, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.special import expit
from scipy.stats import norm

from binflow.core.flowcore import gaussian_bayes_residual
from binflow.errors import DomainError
from binflow.models import AnalysisConstants, AnalysisReport
from binflow.utils.helpers import fit_loglog_slope

Case = Literal["continuous", "binary"]

# exponent n of the boundary growth e^{n u} of the effective integrand
BOUNDARY_ORDER = {"continuous": 2, "binary": 4}

FLOAT64_LOG_MAX = math.log(np.finfo(np.float64).max)


def _spectrum(case: Case, constants: AnalysisConstants, sigma: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if case == "binary":
        return None
    if sigma is None:
        return np.ones(constants.D)
    gaussian_bayes_residual(sigma, 0.5)  # validates symmetry and definiteness
    return np.linalg.eigvalsh(np.asarray(sigma, dtype=np.float64))


def _residual(t, one_minus_t, case: Case, constants: AnalysisConstants, spectrum):
    """R(t); the continuous branch uses the eigen-form lambda a^2 / (t^2 lambda + a^2), a = 1 - t"""
    if case == "binary":
        return constants.eps_resid_sq * np.ones_like(np.asarray(t, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)[..., None]
    a2 = np.asarray(one_minus_t, dtype=np.float64)[..., None] ** 2
    return np.sum(spectrum * a2 / (t * t * spectrum + a2), axis=-1)


def variance_integrand(t: float, case: Case, constants: AnalysisConstants,
                       sigma: Optional[np.ndarray] = None) -> float:
    """Lower bound 4c / (1 - t)^4 * R(t) on the mismatched gradient second moment"""
    if not 0.0 < t < 1.0:
        raise DomainError(f"t={t} outside (0, 1)")
    if case == "continuous":
        sigma = np.eye(constants.D) if sigma is None else sigma
        residual = gaussian_bayes_residual(sigma, t)
    else:
        residual = constants.eps_resid_sq
    return 4.0 * constants.c / (1.0 - t) ** 4 * residual


def truncated_variance_integral(t_max: float, case: Case, constants: AnalysisConstants,
                                sigma: Optional[np.ndarray] = None) -> float:
    """Integral of the integrand over [0, t_max] by adaptive quadrature"""
    if not 0.0 < t_max < 1.0:
        raise DomainError(f"t_max={t_max} outside (0, 1)")
    spectrum = _spectrum(case, constants, sigma)

    def integrand(t: float) -> float:
        a = 1.0 - t
        return 4.0 * constants.c / a ** 4 * float(_residual(t, a, case, constants, spectrum))

    value, _ = quad(integrand, 0.0, t_max, epsabs=0.0, epsrel=1e-11, limit=500)
    return value


def closed_form_truncated_integral(t_max: float, case: Case, constants: AnalysisConstants) -> float:
    """Antiderivative oracle; the continuous form assumes isotropic Sigma = I_D.

    binary:     (4 c eps^2 / 3) [u^-3 - 1]
    continuous: 4 c D [1/u - 1 - 2 ln u + ln(2u^2 - 2u + 1)]
    with u = 1 - t_max.
    """
    u = 1.0 - t_max
    if case == "binary":
        return 4.0 * constants.c * constants.eps_resid_sq / 3.0 * (u ** -3 - 1.0)
    return 4.0 * constants.c * constants.D * (
        1.0 / u - 1.0 - 2.0 * math.log(u) + math.log(2.0 * u * u - 2.0 * u + 1.0))


def integrand_slope(case: Case, constants: AnalysisConstants, t_lo: float = 0.99,
                    t_hi: float = 0.9999, points: int = 25) -> float:
    """Log-log slope of the integrand against (1 - t) near the boundary"""
    gaps = np.geomspace(1.0 - t_lo, 1.0 - t_hi, points)
    values = [variance_integrand(1.0 - g, case, constants) for g in gaps]
    return fit_loglog_slope(gaps, values)


def integral_slope(case: Case, constants: AnalysisConstants, t_lo: float = 0.9,
                   t_hi: float = 0.999, points: int = 13) -> float:
    """Log-log slope of the truncated integral against (1 - t_max)"""
    gaps = np.geomspace(1.0 - t_lo, 1.0 - t_hi, points)
    values = [truncated_variance_integral(1.0 - g, case, constants) for g in gaps]
    return fit_loglog_slope(gaps, values)


def _log_weighted_integrand(u: np.ndarray, s: float, m: float, case: Case,
                            constants: AnalysisConstants, spectrum) -> np.ndarray:
    """log of pi_LN(t) * integrand(t) * dt/du evaluated in logit space.

    The substitution t = sigmoid(u) turns pi_LN(t) dt into the normal density
    N(u; m, s^2) du, and (1 - t)^-4 into (1 + e^u)^4.
    """
    u = np.asarray(u, dtype=np.float64)
    residual = _residual(expit(u), expit(-u), case, constants, spectrum)
    with np.errstate(divide="ignore"):
        log_residual = np.log(residual)
    return (norm.logpdf(u, loc=m, scale=s) + math.log(4.0 * constants.c)
            + 4.0 * np.logaddexp(0.0, u) + log_residual)


def weighted_variance_integral(s: float, m: float, case: Case, constants: AnalysisConstants,
                               sigma: Optional[np.ndarray] = None) -> float:
    """Cumulative variance under logit-normal sampling, integrated over u in [-40, 40]"""
    if s <= 0:
        raise DomainError("s must be positive")
    spectrum = _spectrum(case, constants, sigma)
    peak = m + BOUNDARY_ORDER[case] * s * s
    breakpoints = [p for p in (m, peak) if -40.0 < p < 40.0]

    def integrand(u: float) -> float:
        return float(np.exp(_log_weighted_integrand(np.array(u), s, m, case, constants, spectrum)))

    value, _ = quad(integrand, -40.0, 40.0, points=breakpoints or None, epsabs=0.0,
                    epsrel=1e-10, limit=500)
    return value


def effective_integrand(u: np.ndarray, s: float, m: float, case: Case) -> np.ndarray:
    """Boundary-asymptotic effective density exp(n u - (u - m)^2 / 2 s^2), unnormalized"""
    n = BOUNDARY_ORDER[case]
    u = np.asarray(u, dtype=np.float64)
    log_value = n * u - (u - m) ** 2 / (2.0 * s * s)
    return np.exp(log_value - log_value.max())


def effective_peak(s: float, m: float, case: Case, constants: Optional[AnalysisConstants] = None,
                   grid_step: float = 1e-3, u_range: Tuple[float, float] = (-40.0, 40.0)) -> Tuple[float, float]:
    """Grid argmax of the asymptotic and of the exact logit-space integrand"""
    if s <= 0:
        raise DomainError("s must be positive")
    constants = constants or AnalysisConstants()
    grid = np.arange(u_range[0], u_range[1] + grid_step / 2, grid_step)
    asymptotic = float(grid[np.argmax(effective_integrand(grid, s, m, case))])
    spectrum = _spectrum(case, constants, None)
    exact = float(grid[np.argmax(_log_weighted_integrand(grid, s, m, case, constants, spectrum))])
    return asymptotic, exact


def logit_normal_mass_above(t: float, m: float, s: float) -> float:
    """P(T >= t) for T = sigmoid(U), U ~ N(m, s^2)"""
    if not 0.0 < t < 1.0:
        raise DomainError(f"t={t} outside (0, 1)")
    return float(norm.sf(math.log(t / (1.0 - t)), loc=m, scale=s))


def logit_normal_mass_below(t: float, m: float, s: float) -> float:
    return 1.0 - logit_normal_mass_above(t, m, s)


class SamplingGap(NamedTuple):
    u_peak: float
    t_peak: float
    mass_above: float
    u_overflow: float
    overflow_mass: float


def sampling_gap_report(s: float, m: float, overflow_exponent: float = FLOAT64_LOG_MAX,
                        case: Case = "binary", grid_step: float = 1e-3) -> SamplingGap:
    """Where the effective integrand peaks and how little sampling mass reaches it.

    ``mass_above`` is the logit-normal probability of drawing t in
    [t_peak, 1); ``overflow_mass`` the probability of drawing u beyond the
    point where e^{n u} exceeds ``exp(overflow_exponent)``.
    """
    if s <= 0:
        raise DomainError("s must be positive")
    u_peak, _ = effective_peak(s, m, case, grid_step=grid_step)
    u_overflow = overflow_exponent / BOUNDARY_ORDER[case]
    return SamplingGap(
        u_peak=u_peak,
        t_peak=float(expit(u_peak)),
        mass_above=float(norm.sf(u_peak, loc=m, scale=s)),
        u_overflow=u_overflow,
        overflow_mass=float(norm.sf(u_overflow, loc=m, scale=s)),
    )


def analysis_report(case: Case, s: float, m: float = 0.0,
                    constants: Optional[AnalysisConstants] = None,
                    overflow_exponent: float = FLOAT64_LOG_MAX) -> AnalysisReport:
    """Everything the analyze command reports for one manifold case"""
    constants = constants or AnalysisConstants()
    gap = sampling_gap_report(s, m, overflow_exponent, case)
    _, exact_peak = effective_peak(s, m, case, constants)
    return AnalysisReport(
        case=case,
        slope_integrand=integrand_slope(case, constants),
        slope_integral=integral_slope(case, constants),
        u_peak=gap.u_peak,
        t_peak=gap.t_peak,
        mass_above=gap.mass_above,
        u_peak_exact=exact_peak,
        weighted_integral=weighted_variance_integral(s, m, case, constants),
        u_overflow=gap.u_overflow,
        overflow_mass=gap.overflow_mass,
        s=s,
        m=m,
    )
