"""Monte Carlo engine for range-R bond percolation and SIR epidemics."""

__version__ = "0.1.0"

from .bonds import BondOracle, StreamRng, derive_seed
from .epidemic import (
    EpidemicState,
    StopRule,
    TrialResult,
    frontier,
    monotone_coupling_check,
    percolation_cluster,
    run_trial,
    step,
)
from .lattice import Box, EdgeKey, LatticeParams, edge_key, neighbors

__all__ = [
    "BondOracle",
    "Box",
    "EdgeKey",
    "EpidemicState",
    "LatticeParams",
    "StopRule",
    "StreamRng",
    "TrialResult",
    "derive_seed",
    "edge_key",
    "frontier",
    "monotone_coupling_check",
    "neighbors",
    "percolation_cluster",
    "run_trial",
    "step",
]
