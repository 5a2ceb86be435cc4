"""Module detection on collectively factorized heterogeneous data."""

from .chains import Chain, MaterializedChain, Step, enumerate_chains, materialize, parse_chain_spec
from .detection import DetectionConfig, Module, detect, detect_cpe, detect_cpi
from .factorization import FactorizationOptions, LatentModel, factorize, load_model, save_model, select_ranks
from .graph import FusionGraph, GraphError, load_fusion_graph, normalize_matrix, row_stochastic, save_fusion_graph
from .scoring import PivotState, gbin, log_gbin, p_cpe, p_cpi

__version__ = "0.1.0"

__all__ = [
    "Chain",
    "DetectionConfig",
    "FactorizationOptions",
    "FusionGraph",
    "GraphError",
    "LatentModel",
    "MaterializedChain",
    "Module",
    "PivotState",
    "Step",
    "detect",
    "detect_cpe",
    "detect_cpi",
    "enumerate_chains",
    "factorize",
    "gbin",
    "load_fusion_graph",
    "load_model",
    "log_gbin",
    "materialize",
    "normalize_matrix",
    "p_cpe",
    "p_cpi",
    "parse_chain_spec",
    "row_stochastic",
    "save_fusion_graph",
    "save_model",
    "select_ranks",
]
