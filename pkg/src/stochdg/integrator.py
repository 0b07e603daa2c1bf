"""Euler-Maruyama time stepping of the fully discrete stochastic system.

The chain is u^{n+1} = u^n + dt * L u^n + f^n with f^n = sqrt(dt) * f and f
drawn fresh each step from a sampler.  Stepping runs in chunks: noise for a
chunk is pre-generated (vectorized Philox + inverse-CDF), then a compiled
csr-matvec loop advances the state and records every post-step state for
the observers.  Cost per step is O(nnz(L)) = O(N).

The optional temporal-correction mode replaces the sampler by a dense
factor of the Euler-compensated noise covariance
G = -LC - (LC)^T - dt * L C L^T; it is off by default and capped at dense
oracle scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import balance
from .operators import DGSystem, Regime, mean_zero_project
from .samplers import DenseFactorSampler, GaussianStream, NoiseSampler

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

__all__ = [
    "SimulationConfig",
    "RunResult",
    "DivergenceError",
    "em_step",
    "run",
    "estimate_spectral_radius",
    "simulate_dense_chain",
]


class DivergenceError(RuntimeError):
    """The chain produced a non-finite state."""


@dataclass
class SimulationConfig:
    """Time-stepping parameters for one stochastic run."""

    dt: float
    n_steps: int
    burn_in_fraction: float = 0.1
    seed: int = 0
    temporal_correction: bool = False
    chunk_steps: int = 2048
    check_stability: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if not (0.0 <= self.burn_in_fraction < 1.0):
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.chunk_steps < 1:
            raise ValueError("chunk_steps must be positive")

    @property
    def burn_in_steps(self) -> int:
        return int(math.floor(self.burn_in_fraction * self.n_steps))


@dataclass
class RunResult:
    final_state: np.ndarray
    n_steps: int
    n_samples: int          # post-burn-in states fed to observers
    spectral_radius: Optional[float] = None


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _chain_chunk(indptr, indices, data, u, noise, dt, out):  # pragma: no cover
        n_steps, n = noise.shape
        for k in range(n_steps):
            for i in range(n):
                s = 0.0
                for jj in range(indptr[i], indptr[i + 1]):
                    s += data[jj] * u[indices[jj]]
                out[k, i] = u[i] + dt * s + noise[k, i]
            u = out[k]
        return u

    @numba.njit(cache=True)
    def _chain_chunk_pinned(indptr, indices, data, u, noise, dt,
                            pin_idx, pin_val, out):  # pragma: no cover
        n_steps, n = noise.shape
        for k in range(n_steps):
            for i in range(n):
                s = 0.0
                for jj in range(indptr[i], indptr[i + 1]):
                    s += data[jj] * u[indices[jj]]
                out[k, i] = u[i] + dt * s + noise[k, i]
            for t in range(pin_idx.shape[0]):
                out[k, pin_idx[t]] = pin_val[t]
            u = out[k]
        return u

else:  # pure-numpy fallback, same arithmetic order per step

    def _chain_chunk(indptr, indices, data, u, noise, dt, out):
        mat = sp.csr_matrix((data, indices, indptr), shape=(noise.shape[1],) * 2)
        for k in range(noise.shape[0]):
            out[k] = u + dt * (mat @ u) + noise[k]
            u = out[k]
        return u

    def _chain_chunk_pinned(indptr, indices, data, u, noise, dt, pin_idx, pin_val, out):
        mat = sp.csr_matrix((data, indices, indptr), shape=(noise.shape[1],) * 2)
        for k in range(noise.shape[0]):
            out[k] = u + dt * (mat @ u) + noise[k]
            out[k, pin_idx] = pin_val
            u = out[k]
        return u


def em_step(u: np.ndarray, l_apply, f: np.ndarray, dt: float,
            pin_idx: Optional[np.ndarray] = None,
            pin_val: Optional[np.ndarray] = None,
            step: int = 0) -> np.ndarray:
    """One Euler-Maruyama update u + dt*L(u) + f; f is already sqrt(dt)-scaled.

    Strong-Dirichlet callers pass pinned boundary indices/values, reapplied
    after the update.
    """
    out = u + dt * l_apply(u) + f
    if pin_idx is not None and pin_idx.size:
        out[pin_idx] = 0.0 if pin_val is None else pin_val
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite state at step {step}; reduce dt")
    return out


def estimate_spectral_radius(gen: sp.csr_matrix, n_iter: int = 80, seed: int = 0) -> float:
    """Power-iteration estimate of max |eigenvalue| of the generator."""
    n = gen.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = gen @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        lam = nrm
        v = w / nrm
    return float(lam)


def _dense_corrected_sampler(system: DGSystem, dt: float) -> DenseFactorSampler:
    l = system.dense_generator()
    c = system.target_covariance_dense()
    g = balance.noise_covariance_temporal(l, c, dt)
    return DenseFactorSampler.from_covariance(g)


def run(system: DGSystem, sampler, config: SimulationConfig,
        observers: Sequence = (), u0: Optional[np.ndarray] = None) -> RunResult:
    """Step the chain, feeding every post-burn-in state to the observers.

    Observers implement observe_block(step_indices, states) with states of
    shape (k, n_dof); they are invoked synchronously in chunk order.
    """
    if getattr(sampler, "n_dof", system.n_dof) != system.n_dof:
        raise ValueError("sampler/system size mismatch")
    if isinstance(sampler, NoiseSampler) and sampler.regime is not system.regime:
        raise ValueError(
            f"sampler regime {sampler.regime.value} != system regime {system.regime.value}")
    stream = GaussianStream(config.seed)
    if config.temporal_correction:
        sampler = _dense_corrected_sampler(system, config.dt)

    # initial state defaults to zero; mean-zero regimes are kept on their
    # subspace by the chunk-end projection guard below
    u = np.zeros(system.n_dof) if u0 is None else np.array(u0, dtype=float)
    pin_idx = system.boundary_dofs
    pin_val = np.zeros(pin_idx.size)
    if pin_idx.size:
        u[pin_idx] = pin_val

    radius = None
    if config.check_stability and config.n_steps > 0:
        radius = estimate_spectral_radius(system.generator)
        if config.dt * radius >= 2.0:
            warnings.warn(
                f"dt * |lambda_max| = {config.dt * radius:.3g} >= 2: the Euler chain "
                "is outside its stability region", RuntimeWarning, stacklevel=2)

    gen = system.generator
    indptr, indices, data = gen.indptr, gen.indices, gen.data
    sqdt = math.sqrt(config.dt)
    burn = config.burn_in_steps
    n_samples = 0
    step = 0
    while step < config.n_steps:
        k = min(config.chunk_steps, config.n_steps - step)
        noise = sampler.draw_block(stream, step, k) * sqdt
        if config.temporal_correction and system.regime.mean_zero:
            noise = mean_zero_project(noise, system)
        out = np.empty((k, system.n_dof))
        if pin_idx.size:
            u = _chain_chunk_pinned(indptr, indices, data, u, noise, config.dt,
                                    pin_idx, pin_val, out)
        else:
            u = _chain_chunk(indptr, indices, data, u, noise, config.dt, out)
        if not np.isfinite(out[-1]).all():
            bad = int(np.where(~np.isfinite(out).all(axis=1))[0][0])
            raise DivergenceError(f"non-finite state at step {step + bad}; reduce dt")
        u = u.copy()
        if system.regime.mean_zero:
            u = mean_zero_project(u, system)  # guard round-off drift between chunks
        first_kept = max(burn - step, 0)
        if first_kept < k:
            steps_kept = np.arange(step + first_kept, step + k)
            states = out[first_kept:]
            for obs in observers:
                obs.observe_block(steps_kept, states)
            n_samples += k - first_kept
        step += k
    return RunResult(final_state=u, n_steps=config.n_steps,
                     n_samples=n_samples, spectral_radius=radius)


def simulate_dense_chain(l: np.ndarray, noise_cov: np.ndarray, dt: float,
                         n_steps: int, seed: int = 0,
                         burn_in_fraction: float = 0.1,
                         chunk_steps: int = 65536) -> np.ndarray:
    """Empirical stationary second moment of the dense Euler chain.

    Drives u^{n+1} = u^n + dt*L u^n + sqrt(dt)*Q xi with Q Q^T = noise_cov;
    the small-system companion of ``run`` used for covariance studies of
    the temporal-correction formulas.
    """
    l = np.atleast_2d(np.asarray(l, dtype=float))
    n = l.shape[0]
    factor = balance.symmetric_factor(np.atleast_2d(noise_cov))
    gen = sp.csr_matrix(l)
    stream = GaussianStream(seed)
    u = np.zeros(n)
    burn = int(math.floor(burn_in_fraction * n_steps))
    second = np.zeros((n, n))
    count = 0
    sqdt = math.sqrt(dt)
    step = 0
    while step < n_steps:
        k = min(chunk_steps, n_steps - step)
        xi = stream.normals(2, step, k, 1, n)[:, 0, :]
        noise = sqdt * (xi @ factor.T)
        out = np.empty((k, n))
        u = _chain_chunk(gen.indptr, gen.indices, gen.data, u, noise, dt, out).copy()
        if not np.isfinite(u).all():
            raise DivergenceError(f"non-finite state near step {step}; reduce dt")
        first_kept = max(burn - step, 0)
        if first_kept < k:
            x = out[first_kept:]
            second += x.T @ x
            count += x.shape[0]
        step += k
    if count == 0:
        raise ValueError("no post-burn-in samples accumulated")
    return second / count
