"""Numerical homogenization of curl-curl problems on tetrahedral meshes."""

__version__ = "0.1.0"
