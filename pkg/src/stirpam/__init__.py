"""Exclusion-process simulation and exact computation on discrete tori.

Subpackages cover torus geometry and scaled norms, the stirring
construction with exact finite-state oracles, heat kernels and decay
orders, moment/cumulant formulas for the exclusion field, counterterm
tables, the renormalized lattice Anderson solver with a killed-walk
oracle, and survival experiments in dynamic environments.
"""

__version__ = "0.1.0"
