"""Simulation and verification lab for mean-field particle systems.

Modules: ``kernels`` (model catalog and assumption checker), ``simulate``
(particle system, limit flow, decoupled SDE), ``transport`` (eta-Wasserstein
solvers), ``chaos`` (rate experiments) and ``cli``.
"""

from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
