"""Desk-scale laboratory for low-rank adapter variants."""

from .adapters import REGISTRY, AdapterSpec, build_adapter, from_state_dict
from .autodiff import Tape, grad_check
from .linalg import RngStream

__version__ = "0.1.0"

__all__ = ["AdapterSpec", "REGISTRY", "RngStream", "Tape", "build_adapter", "from_state_dict", "grad_check"]
