"""Neural deformation field fitting from the unit square to a target surface."""

from .embedding import SquareEmbedding
from .field import DEFAULT_WIDTHS, Adam, DeformField, parameter_count
from .fit import FitConfig, FitReport, extract_vdm, fit, heldout_chamfer, init_to_plane
from .losses import boundary_loss, boundary_residual, chamfer_loss, plane_loss

__all__ = [
    "DEFAULT_WIDTHS",
    "Adam",
    "DeformField",
    "FitConfig",
    "FitReport",
    "SquareEmbedding",
    "boundary_loss",
    "boundary_residual",
    "chamfer_loss",
    "extract_vdm",
    "fit",
    "heldout_chamfer",
    "init_to_plane",
    "parameter_count",
    "plane_loss",
]
