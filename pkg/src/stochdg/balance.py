"""Dense fluctuation-dissipation balance relations.

Dimension-agnostic reference implementations tying the noise covariance G
of a linear Ito system dZ = L Z dt + Q dW (with G = Q Q^T) to its
stationary covariance C, for the semi-discrete system and for the fully
discrete Euler chain.  Everything here is dense and factorization-based;
by convention this layer is used at oracle scale (a few thousand
unknowns), where reproducibility to round-off beats speed.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla

__all__ = [
    "SingularOperatorError",
    "noise_covariance_spatial",
    "noise_covariance_temporal",
    "steady_state_covariance_spatial",
    "steady_state_covariance_temporal",
    "lag_autocovariance",
    "symmetric_factor",
]

LC_SYMMETRY_RTOL = 1e-8


class SingularOperatorError(np.linalg.LinAlgError):
    """A factor that must be inverted is singular."""


def _as_square(a, name: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _check_pair(l, c):
    l = _as_square(l, "L")
    c = _as_square(c, "C")
    if l.shape != c.shape:
        raise ValueError(f"dimension mismatch: L is {l.shape}, C is {c.shape}")
    return l, c


def _solve(a, b, what: str) -> np.ndarray:
    """Pivoted dense solve; raises SingularOperatorError on singular input."""
    try:
        lu, piv = sla.lu_factor(a)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularOperatorError(f"{what} is not factorizable: {exc}") from exc
    d = np.abs(np.diag(lu))
    if np.min(d) <= np.finfo(float).eps * max(1.0, np.max(d)) * a.shape[0]:
        raise SingularOperatorError(f"{what} is singular to working precision")
    return sla.lu_solve((lu, piv), b)


def _warn_if_lc_asymmetric(l, c, context: str) -> None:
    # the relation assumes L C symmetric for the true stationary covariance;
    # an asymmetric result means the hypothesis failed (equivalently, the
    # returned C leaves a Lyapunov residual L C + C L^T + G proportional to
    # C - C^T)
    asym = np.linalg.norm(c - c.T)
    if asym > LC_SYMMETRY_RTOL * max(np.linalg.norm(c), np.finfo(float).tiny):
        warnings.warn(
            f"{context}: L C is not symmetric (returned covariance has relative "
            f"asymmetry {asym / np.linalg.norm(c):.2e}); the result solves the "
            "symmetric relation, not the full Lyapunov equation",
            RuntimeWarning,
            stacklevel=3,
        )


def noise_covariance_spatial(l, c) -> np.ndarray:
    """Noise covariance balancing dissipation in continuous time: G = -LC - (LC)^T."""
    l, c = _check_pair(l, c)
    lc = l @ c
    return -lc - lc.T


def noise_covariance_temporal(l, c, dt: float) -> np.ndarray:
    """Euler-chain noise covariance: G = -LC - (LC)^T - dt * L C L^T.

    Reduces to the continuous-time relation at dt = 0.
    """
    l, c = _check_pair(l, c)
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    lc = l @ c
    return -lc - lc.T - dt * (lc @ l.T)


def steady_state_covariance_spatial(l, g) -> np.ndarray:
    """Stationary covariance C = -1/2 L^-1 G (valid when L C is symmetric)."""
    l, g = _check_pair(l, g)
    c = -0.5 * _solve(l, g, "L")
    _warn_if_lc_asymmetric(l, c, "steady_state_covariance_spatial")
    return c


def steady_state_covariance_temporal(l, g, dt: float) -> np.ndarray:
    """Euler-chain stationary covariance C = -1/2 L^-1 (I + dt/2 L^T)^-1 G."""
    l, g = _check_pair(l, g)
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    n = l.shape[0]
    inner = _solve(np.eye(n) + 0.5 * dt * l.T, g, "I + dt/2 L^T")
    c = -0.5 * _solve(l, inner, "L")
    _warn_if_lc_asymmetric(l, c, "steady_state_covariance_temporal")
    return c


def lag_autocovariance(l, c, lag, dt: float | None = None) -> np.ndarray:
    """Predicted lag covariance of the stationary process.

    Continuous time (dt None): expm(lag * L) @ C for lag >= 0.
    Discrete chain (dt given): (I + dt L)^k @ C with integer step count k.
    """
    l, c = _check_pair(l, c)
    if dt is None:
        if lag < 0:
            raise ValueError(f"lag must be nonnegative, got {lag}")
        if lag == 0:
            return c.copy()
        return sla.expm(float(lag) * l) @ c
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    k = int(lag)
    if k != lag or k < 0:
        raise ValueError(f"discrete lag must be a nonnegative step count, got {lag}")
    return np.linalg.matrix_power(np.eye(l.shape[0]) + dt * l, k) @ c


def symmetric_factor(g, clip_rtol: float = 1e-12) -> np.ndarray:
    """Factor Q of a symmetric PSD matrix with Q Q^T = G (eigenvalue based).

    Eigenvalues within clip_rtol of zero (relative to the largest) are
    clipped to zero; genuinely negative ones raise.
    """
    g = _as_square(g, "G")
    w, v = np.linalg.eigh(0.5 * (g + g.T))
    floor = -clip_rtol * max(w[-1], 0.0)
    if w[0] < floor:
        raise SingularOperatorError(
            f"matrix is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    return v * np.sqrt(np.clip(w, 0.0, None))
