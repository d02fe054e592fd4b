"""bevkit: depth supervision, temporal fusion and instance refinement kernels for BEV fusion."""

__version__ = "0.1.0"
