"""Stochastic discontinuous Galerkin methods with prescribed noise covariance.

Discretizes the stochastic diffusion equation on 2-D quadrilateral meshes
with a minimal-dissipation LDG scheme, prescribes the driving-noise
covariance by discrete fluctuation-dissipation balance, and generates the
noise in O(N) per step from per-element block factors.
"""

__version__ = "0.1.0"

from . import balance, integrator, matio, meshes, operators, samplers, statistics
from .meshes import (
    BoundaryTag,
    QuadMesh,
    annulus_mesh,
    apply_periodic,
    cartesian_mesh,
    load_mesh,
    perturbed_cartesian_mesh,
    save_mesh,
)
from .operators import (
    BoundaryConditionSpec,
    DGSystem,
    LdgParameters,
    Regime,
    build_system,
)
from .samplers import GaussianStream, NoiseSampler, build_sampler
from .integrator import SimulationConfig, run

__all__ = [
    "__version__",
    "balance", "integrator", "matio", "meshes", "operators", "samplers", "statistics",
    "BoundaryTag", "QuadMesh", "annulus_mesh", "apply_periodic", "cartesian_mesh",
    "load_mesh", "perturbed_cartesian_mesh", "save_mesh",
    "BoundaryConditionSpec", "DGSystem", "LdgParameters", "Regime", "build_system",
    "GaussianStream", "NoiseSampler", "build_sampler",
    "SimulationConfig", "run",
]
