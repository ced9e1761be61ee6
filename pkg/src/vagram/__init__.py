"""Value-aware model learning on a desk-scale Pendulum."""

__version__ = "0.1.0"
