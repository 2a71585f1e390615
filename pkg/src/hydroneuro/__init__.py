"""Stochastic spiking networks with gap junctions and their mean-field density limit."""

__version__ = "0.1.0"

from .model import ModelSpec, build_mesh, build_model, sample_initial_state  # noqa: E402
from .microsim import NetworkState, simulate  # noqa: E402
from .limit import solve_pde  # noqa: E402

__all__ = ["ModelSpec", "NetworkState", "build_mesh", "build_model", "sample_initial_state", "simulate", "solve_pde"]
