"""Subspace diffusion generative models at desk scale."""

from subdiff.sde import VEProcess, SubspaceSchedule, make_schedule
from subdiff.subspace import (
    Basis,
    DownsamplingChain,
    ExplicitChain,
    downsampling_chain,
    pca_subspace,
    patch_pca_basis,
    rmsd_per_dim,
)

__version__ = "0.1.0"

__all__ = [
    "Basis",
    "DownsamplingChain",
    "ExplicitChain",
    "SubspaceSchedule",
    "VEProcess",
    "downsampling_chain",
    "make_schedule",
    "patch_pca_basis",
    "pca_subspace",
    "rmsd_per_dim",
]
