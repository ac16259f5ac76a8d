"""hypergrid: spectral-spatial 3D CNN classification of hyperspectral scenes, from scratch on numpy."""

__version__ = "0.1.0"
