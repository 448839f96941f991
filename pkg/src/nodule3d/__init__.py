"""3D attention blocks and a two-stage nodule detector on a small numpy autodiff core."""

__version__ = "0.1.0"
