"""DC-OPF warm starts with learned AC residual corrections."""

__version__ = "0.1.0"
