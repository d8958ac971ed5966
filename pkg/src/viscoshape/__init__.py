"""Discrete geodesic calculus in the space of viscous-fluid shapes."""
from .energy import MaterialParams, density_W, density_dW, density_d2W, dissipation_rate
from .fem import Deformation, Mesh, ShapeMask, make_mesh, rasterize_mask
from .geodesic import DiscretePath, EnergyBreakdown, PathResult, SolverConfig, minimize_path
from .logexp import ShapeVariation, exp_1, exp_2, exp_k, log_K
from .solvers import SolverError
from .transport import TransportJob, transport_path

__all__ = [
    "MaterialParams", "density_W", "density_dW", "density_d2W", "dissipation_rate",
    "Deformation", "Mesh", "ShapeMask", "make_mesh", "rasterize_mask",
    "DiscretePath", "EnergyBreakdown", "PathResult", "SolverConfig", "minimize_path",
    "ShapeVariation", "exp_1", "exp_2", "exp_k", "log_K", "SolverError",
    "TransportJob", "transport_path",
]
__version__ = "0.1.0"
