import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.errors import ConvergenceError, NumericalPreconditionError, SpectralFloorError
from app.grid import GridFunction, SpectralFunction, convolve
from app.metrics import metrics

logger = logging.getLogger(__name__)

SPECTRAL_FLOOR = 1e-8


@dataclass(frozen=True)
class OzeSolution:
    q: GridFunction
    t: float
    method: str
    residual: float
    min_denominator: float = 1.0
    min_frequency: Tuple[float, ...] = ()
    terms: int = 0


def oze_residual(P: GridFunction, Q: GridFunction, t: float) -> float:
    """sup norm of P - Q - t Q*P"""
    return (P - Q - t * convolve(Q, P)).sup_norm()


def solve_oze_fourier(P: GridFunction, t: float, spectral_floor: float = SPECTRAL_FLOOR) -> OzeSolution:
    """Solve P = Q + t Q*P by dividing spectra: Q^ = P^ / (1 + t P^)"""
    if not t >= 0:
        raise NumericalPreconditionError(f"intensity must be non-negative, got {t}")
    if t == 0:
        return OzeSolution(q=P, t=t, method="fourier", residual=0.0)

    p_hat = P.spectral().coefficients
    denominator = 1.0 + t * p_hat
    flat = int(np.argmin(denominator.real))
    index = np.unravel_index(flat, p_hat.shape)
    min_value = float(denominator.real[index])
    frequency = tuple(float(w) for w in P.geometry.angular_frequencies()[index])
    if not min_value > spectral_floor:
        raise SpectralFloorError(
            f"1 + t*P^(w) = {min_value:.6g} at angular frequency w = {frequency} "
            f"(index {tuple(int(i) for i in index)}) is not above the floor {spectral_floor:g}; "
            f"the input pair connectedness is too noisy or the intensity t = {t} is supercritical",
            {"min_denominator": min_value, "frequency": frequency, "t": t},
        )

    q = SpectralFunction(P.geometry, p_hat / denominator).to_grid()
    residual = oze_residual(P, q, t)
    if P.is_even() and not q.is_even():
        logger.warning("spectral solve lost evenness of the input")
    metrics.increment("oze_fourier_solves")
    logger.debug(f"fourier OZE solve t={t}: min(1+tP^)={min_value:.6g}, residual={residual:.3g}")
    return OzeSolution(q=q, t=t, method="fourier", residual=residual,
                       min_denominator=min_value, min_frequency=frequency)


def solve_oze_neumann(P: GridFunction, t: float, max_terms: int = 500, tol: float = 1e-12) -> OzeSolution:
    """Q as the partial sums of (-t)^n P^{*(n+1)}; needs t * ||P||_1 < 1"""
    contraction = t * P.l1_norm()
    if not t >= 0 or not contraction < 1:
        raise NumericalPreconditionError(
            f"Neumann series needs t*||P||_1 < 1, got {contraction:.6g}",
            {"t": t, "l1_norm": P.l1_norm()},
        )
    if t == 0:
        return OzeSolution(q=P, t=t, method="neumann", residual=0.0, terms=1)

    total = P.values.copy()
    term = P
    terms = 1
    while True:
        term = -t * convolve(term, P)
        if term.sup_norm() < tol:
            break
        if terms >= max_terms:
            raise ConvergenceError(
                f"Neumann series did not reach tolerance {tol:g} within {max_terms} terms "
                f"(last term sup norm {term.sup_norm():.3g})",
                {"terms": terms, "last_term": term.sup_norm()},
            )
        total += term.values
        terms += 1

    q = P.with_values(total)
    metrics.increment("oze_neumann_solves")
    return OzeSolution(q=q, t=t, method="neumann", residual=oze_residual(P, q, t), terms=terms)


def neumann_tail_bound(P: GridFunction, t: float, terms: int) -> float:
    """Bound on the sup norm of the remainder after `terms` terms of the Neumann series"""
    contraction = t * P.l1_norm()
    if not contraction < 1:
        return float("inf")
    return contraction ** terms * P.sup_norm() / (1.0 - contraction)


def mean_cluster_from_Q(Q: GridFunction, t: float) -> float:
    """Mean size of the typical cluster, (1 - t * integral Q)^-1"""
    if not t >= 0:
        raise NumericalPreconditionError(f"intensity must be non-negative, got {t}")
    integral = Q.integral()
    if t == 0:
        return 1.0
    if integral < 0 or not integral < 1.0 / t:
        raise NumericalPreconditionError(
            f"integral of Q = {integral:.6g} lies outside [0, 1/t) = [0, {1.0 / t:.6g}); "
            "the input P is invalid or the intensity is supercritical",
            {"integral_q": integral, "t": t},
        )
    return 1.0 / (1.0 - t * integral)


def mean_cluster_from_P(P: GridFunction, t: float) -> float:
    """Mean size of the typical cluster, 1 + t * integral P"""
    return 1.0 + t * P.integral()
