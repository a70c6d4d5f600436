"""EEG forward solutions for point dipoles on voxel hexahedral meshes with
the subtraction approach, discretised by continuous Galerkin (CG) or
symmetric weighted interior-penalty discontinuous Galerkin (DG)."""

__version__ = "0.1.0"
