"""Diffusion tensor estimation from six-direction DWIs with patch-wise networks."""

__version__ = "0.1.0"
