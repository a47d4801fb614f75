"""Single-molecule photon statistics: simulation, correlation, fitting and growth thermodynamics."""

__version__ = "0.1.0"
