"""FDD-prescribed noise samplers with per-step cost linear in element count.

Each regime's driving field f is generated from i.i.d. standard normals by
block factors and one sparse divergence application:

* periodic / Neumann:  f = sqrt(2) M^-1 D Q xi           (Q Q^T = M^-1 blockwise)
* weak Dirichlet:      f = R1 xi1 + R2 xi2, R1 as above,
                       R2 = sqrt(2) M^-1 V sqrt(-S) from E = V S V^T blockwise
* strong Dirichlet:    f = sqrt(2) C~ D Q xi             (boundary rows exactly zero)
* random-flux baseline: f = ((p+1)^2 / h) M^-1 D xi

In exact arithmetic the sampler covariance equals the prescribed Lambda;
dense exports reproduce it to 1e-10 relative Frobenius at oracle scale.

Randomness comes from a counter-based Philox stream: value (step, element,
lane) is a pure function of (master seed, component, step, element), so
draws are bitwise reproducible for a fixed seed regardless of chunking,
thread count, or element visit order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

from .balance import symmetric_factor
from .meshes import element_areas
from .operators import ConfigurationError, DGSystem, ElementBlockMatrix, Regime

__all__ = [
    "GaussianStream",
    "FactorizationError",
    "NoiseSampler",
    "DenseFactorSampler",
    "block_factor_inverse_mass",
    "build_sampler_neumann_periodic",
    "build_sampler_dirichlet_weak",
    "build_sampler_dirichlet_strong",
    "build_sampler_random_flux",
    "build_sampler",
]

# substream components
_XI_MAIN = 0
_XI_PENALTY = 1
_XI_DENSE = 2


class FactorizationError(np.linalg.LinAlgError):
    """A per-element factorization failed."""


class GaussianStream:
    """Reproducible N(0,1) variates on a (step, unit, lane) grid.

    Philox counters are laid out so that every (step, unit) cell starts at
    its own counter block: a single-step draw is bitwise identical to the
    corresponding rows of any chunked draw.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def normals(self, component: int, step_start: int, n_steps: int,
                n_units: int, count: int) -> np.ndarray:
        """(n_steps, n_units, count) standard normals for the given component."""
        if step_start < 0 or n_steps < 1 or count < 1 or n_units < 1:
            raise ValueError("need step_start >= 0, n_steps, n_units, count >= 1")
        blocks_per_unit = (count + 3) // 4  # Philox4x64 emits 4 doubles per block
        lanes = 4 * blocks_per_unit
        total_blocks = n_units * blocks_per_unit
        bg = Philox(
            key=np.array([self.seed, component], dtype=np.uint64),
            counter=np.array([np.uint64(step_start) * np.uint64(total_blocks), 0, 0, 0],
                             dtype=np.uint64),
        )
        u = Generator(bg).random(n_steps * n_units * lanes, dtype=np.float64)
        u = np.maximum(u, 2.0 ** -54)  # keep ndtri finite at the 2^-53 corner
        return ndtri(u).reshape(n_steps, n_units, lanes)[:, :, :count]


def block_factor_inverse_mass(mass: ElementBlockMatrix) -> ElementBlockMatrix:
    """Per-element factor Q with Q Q^T = M^-1, via the block Cholesky of M."""
    try:
        chol = np.linalg.cholesky(mass.blocks)
    except np.linalg.LinAlgError:
        for e in range(mass.n_elements):
            try:
                np.linalg.cholesky(mass.blocks[e])
            except np.linalg.LinAlgError:
                raise FactorizationError(
                    f"mass block of element {e} is not positive definite") from None
        raise
    q = np.transpose(np.linalg.inv(chol), (0, 2, 1))
    return ElementBlockMatrix(np.ascontiguousarray(q))


@dataclass
class NoiseSampler:
    """Drawable noise field with prescribed covariance, O(N) per step."""

    kind: str                      # "fdd" or "random_flux"
    regime: Regime
    system: DGSystem
    factor_blocks: Optional[ElementBlockMatrix]   # Q (None for random flux)
    out_blocks: ElementBlockMatrix                # M^-1 or masked C~ blocks
    penalty_eigvecs: Optional[np.ndarray] = None  # (nt, m, m) V blocks (weak)
    penalty_sqrt: Optional[np.ndarray] = None     # (nt, m) sqrt(-eigenvalues)
    flux_scale: Optional[np.ndarray] = None       # per-element random-flux factor

    @property
    def n_dof(self) -> int:
        return self.system.n_dof

    def draw_block(self, stream: GaussianStream, step_start: int, n_steps: int) -> np.ndarray:
        """(n_steps, n_dof) independent realizations for consecutive steps."""
        sys = self.system
        nt = sys.mesh.n_elements
        m = sys.ref.n_nodes
        xi = stream.normals(_XI_MAIN, step_start, n_steps, nt, 2 * m)
        xi = xi.reshape(n_steps, nt, 2, m)
        if self.factor_blocks is not None:
            y = np.einsum("eij,kecj->keci", self.factor_blocks.blocks, xi)
        else:
            y = xi
        z = sys.divergence.matrix @ y.reshape(n_steps, 2 * nt * m).T  # (N, K)
        f = np.einsum("eij,kej->kei", self.out_blocks.blocks,
                      np.ascontiguousarray(z.T).reshape(n_steps, nt, m))
        f = f.reshape(n_steps, nt * m)
        if self.kind == "fdd":
            f *= np.sqrt(2.0)
            if self.penalty_sqrt is not None:
                xi2 = stream.normals(_XI_PENALTY, step_start, n_steps, nt, m)
                g2 = np.einsum("eij,ej,kej->kei", self.penalty_eigvecs,
                               self.penalty_sqrt, xi2)
                f += np.sqrt(2.0) * np.einsum(
                    "eij,kej->kei", self.out_blocks.blocks, g2).reshape(n_steps, nt * m)
        else:
            f *= np.repeat(self.flux_scale, m)[None, :]
        if self.regime.mean_zero:
            f -= ((f @ sys.m_one) / sys.total_mass)[:, None]
        return f

    def draw(self, stream: GaussianStream, step: int) -> np.ndarray:
        """Single realization for one step.

        The underlying variates are bitwise chunk-invariant; repeated calls
        with the same (stream seed, step) are bitwise identical, and any
        chunked draw covering the step agrees to round-off (the assembled
        field goes through batched BLAS kernels whose summation order can
        depend on the batch shape).
        """
        if step < 0:
            raise ValueError("step must be nonnegative")
        return self.draw_block(stream, step, 1)[0]

    # ---- dense exports (oracle scale) ----

    def dense_matrix(self) -> np.ndarray:
        """Dense factor R (plus penalty columns for weak Dirichlet)."""
        sys = self.system
        d = sys.dense_divergence()
        out = self.out_blocks.to_dense()
        parts = []
        if self.factor_blocks is not None:
            qv = ElementBlockMatrix(
                np.repeat(self.factor_blocks.blocks, 2, axis=0)).to_dense()
            r = out @ d @ qv
        else:
            r = out @ d
        if self.kind == "fdd":
            parts.append(np.sqrt(2.0) * r)
            if self.penalty_sqrt is not None:
                v = ElementBlockMatrix(self.penalty_eigvecs).to_dense()
                s = np.diag(self.penalty_sqrt.ravel())
                parts.append(np.sqrt(2.0) * out @ v @ s)
        else:
            m = sys.ref.n_nodes
            parts.append(np.repeat(self.flux_scale, m)[:, None] * r)
        r_all = np.hstack(parts)
        if self.regime.mean_zero:
            proj = np.eye(sys.n_dof) - np.outer(np.ones(sys.n_dof), sys.m_one) / sys.total_mass
            r_all = proj @ r_all
        return r_all

    def dense_covariance(self) -> np.ndarray:
        r = self.dense_matrix()
        return r @ r.T

    def prescribed_covariance_dense(self) -> np.ndarray:
        """Lambda from the balance formula (independent of the factor route)."""
        sys = self.system
        d = sys.dense_divergence()
        w = sys.dense_mass_inv()
        w2 = np.repeat(sys.mass_inv.blocks, 2, axis=0)
        s = d @ ElementBlockMatrix(w2).to_dense() @ d.T
        if self.kind == "random_flux":
            m = sys.ref.n_nodes
            sc = np.repeat(self.flux_scale, m)
            lam = (sc[:, None] * w) @ (d @ d.T) @ (w * sc[None, :])
        elif self.regime is Regime.DIRICHLET_STRONG:
            ct = self.out_blocks.to_dense()
            lam = 2.0 * ct @ s @ ct
        else:
            lam = 2.0 * w @ s @ w
            if self.regime is Regime.DIRICHLET_WEAK:
                e = sys.penalty.to_dense()
                lam = lam - 2.0 * w @ e @ w
        if self.regime.mean_zero:
            proj = np.eye(sys.n_dof) - np.outer(np.ones(sys.n_dof), sys.m_one) / sys.total_mass
            lam = proj @ lam @ proj.T
        return lam


def build_sampler_neumann_periodic(system: DGSystem) -> NoiseSampler:
    """f = sqrt(2) M^-1 D Q xi for the E = 0 regimes."""
    if system.regime not in (Regime.PERIODIC, Regime.NEUMANN):
        raise ConfigurationError(f"regime {system.regime.value} is not periodic/Neumann")
    if np.max(np.abs(system.penalty.blocks)) != 0.0:
        raise ConfigurationError("nonzero penalty supplied to the E = 0 sampler")
    return NoiseSampler(
        kind="fdd", regime=system.regime, system=system,
        factor_blocks=block_factor_inverse_mass(system.mass),
        out_blocks=system.mass_inv,
    )


def build_sampler_dirichlet_weak(system: DGSystem,
                                 definiteness_rtol: float = 1e-10) -> NoiseSampler:
    """f = R1 xi1 + R2 xi2 with R2 from the blockwise eigendecomposition of E."""
    if system.regime is not Regime.DIRICHLET_WEAK:
        raise ConfigurationError(f"regime {system.regime.value} is not weak Dirichlet")
    e_blocks = system.penalty.blocks
    w, v = np.linalg.eigh(e_blocks)
    scale = max(float(np.max(np.abs(w))), np.finfo(float).tiny)
    if np.max(w) > definiteness_rtol * scale:
        e_bad = int(np.argmax(np.max(w, axis=1)))
        raise FactorizationError(
            f"penalty block of element {e_bad} has positive eigenvalue "
            f"{np.max(w):.3e}; E must be negative semidefinite")
    neg = -w
    neg[neg < 1e-12 * scale] = 0.0  # clip round-off so sqrt stays real
    return NoiseSampler(
        kind="fdd", regime=system.regime, system=system,
        factor_blocks=block_factor_inverse_mass(system.mass),
        out_blocks=system.mass_inv,
        penalty_eigvecs=np.ascontiguousarray(v),
        penalty_sqrt=np.sqrt(neg),
    )


def build_sampler_dirichlet_strong(system: DGSystem) -> NoiseSampler:
    """f = sqrt(2) C~ D Q xi; every draw is exactly zero at boundary DOFs."""
    if system.regime is not Regime.DIRICHLET_STRONG:
        raise ConfigurationError(f"regime {system.regime.value} is not strong Dirichlet")
    if system.boundary_dofs.size == 0:
        raise ConfigurationError("strong Dirichlet sampler needs a nonempty boundary index set")
    return NoiseSampler(
        kind="fdd", regime=system.regime, system=system,
        factor_blocks=block_factor_inverse_mass(system.mass),
        out_blocks=system.mass_inv_masked,
    )


def build_sampler_random_flux(system: DGSystem, h_mode: str = "per_element") -> NoiseSampler:
    """Baseline f = ((p+1)^2 / h) M^-1 D xi with h the element size.

    h_mode "per_element" uses sqrt(element area); "global" uses the
    mesh-average sqrt(area) everywhere.
    """
    areas = element_areas(system.mesh)
    h = np.sqrt(areas)
    if h_mode == "global":
        h = np.full_like(h, float(np.sqrt(np.mean(areas))))
    elif h_mode != "per_element":
        raise ConfigurationError(f"unknown random-flux h mode {h_mode!r}")
    scale = (system.ref.p + 1) ** 2 / h
    out = system.mass_inv_masked if system.regime is Regime.DIRICHLET_STRONG else system.mass_inv
    return NoiseSampler(
        kind="random_flux", regime=system.regime, system=system,
        factor_blocks=None, out_blocks=out, flux_scale=scale,
    )


def build_sampler(system: DGSystem, kind: str = "fdd",
                  h_mode: str = "per_element") -> NoiseSampler:
    """Regime dispatch used by the experiment driver."""
    if kind == "random_flux":
        return build_sampler_random_flux(system, h_mode)
    if kind != "fdd":
        raise ConfigurationError(f"unknown sampler kind {kind!r}")
    if system.regime in (Regime.PERIODIC, Regime.NEUMANN):
        return build_sampler_neumann_periodic(system)
    if system.regime is Regime.DIRICHLET_WEAK:
        return build_sampler_dirichlet_weak(system)
    return build_sampler_dirichlet_strong(system)


@dataclass
class DenseFactorSampler:
    """Dense Cholesky-style sampler for small systems (temporal-correction path).

    Capped at oracle scale: the dense factor is O(N^2) per draw.
    """

    factor: np.ndarray  # (N, N) with factor @ factor.T = covariance
    _cap: int = 4000

    def __post_init__(self):
        if self.factor.shape[0] > self._cap:
            raise ConfigurationError(
                f"dense sampler capped at {self._cap} DOFs, got {self.factor.shape[0]}")

    @classmethod
    def from_covariance(cls, cov: np.ndarray) -> "DenseFactorSampler":
        return cls(factor=symmetric_factor(cov))

    @property
    def n_dof(self) -> int:
        return self.factor.shape[0]

    def draw_block(self, stream: GaussianStream, step_start: int, n_steps: int) -> np.ndarray:
        xi = stream.normals(_XI_DENSE, step_start, n_steps, 1, self.n_dof)[:, 0, :]
        return xi @ self.factor.T

    def draw(self, stream: GaussianStream, step: int) -> np.ndarray:
        return self.draw_block(stream, step, 1)[0]
