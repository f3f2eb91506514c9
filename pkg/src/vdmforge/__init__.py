"""vdmforge: part flattening, deformation-field fitting and vector displacement maps."""

__version__ = "0.1.0"
