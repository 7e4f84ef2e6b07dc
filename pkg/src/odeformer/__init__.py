"""ODE-inspired residual blocks and the numerics used to check them."""

__version__ = "0.1.0"
