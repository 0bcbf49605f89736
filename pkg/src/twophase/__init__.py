"""Front-tracking finite element solver for 2D two-phase incompressible flow."""

from .assembly import MIDPOINT, VOLUME_FRACTION, PhysParams
from .bulkmesh import AdaptConfig, BulkMesh, build_uniform
from .cli import preset
from .interface import InterfaceCurve
from .solver import SolverConfig
from .spaces import P2P0, P2P1, P2P10
from .timeloop import BenchmarkSeries, Preset, RunConfig, Simulation, run

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "BenchmarkSeries", "BulkMesh", "InterfaceCurve",
    "MIDPOINT", "P2P0", "P2P1", "P2P10", "PhysParams", "Preset", "RunConfig",
    "Simulation", "SolverConfig", "VOLUME_FRACTION", "build_uniform",
    "preset", "run",
]
