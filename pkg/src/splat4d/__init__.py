"""Feed-forward hybrid Gaussian splatting for dynamic urban scenes."""

__version__ = "0.1.0"
