"""Out-of-core multigrid for screened anisotropic Poisson problems on voxel grids."""
__version__ = "0.1.0"
