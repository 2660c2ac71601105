"""Simulation and verification lab for the forced linear stochastic dyadic model.

Three computational views of the same model are provided and cross-checked:
pathwise Galerkin SDE ensembles (:mod:`dyadic_lab.sde`), the second-moment
forward equations (:mod:`dyadic_lab.moments`) and the explosive birth-death
chain behind them (:mod:`dyadic_lab.ctmc`). :mod:`dyadic_lab.crossval` ties
them together and :mod:`dyadic_lab.cli` exposes everything on the command line.
"""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Boundary,
    ModelParams,
    RangeError,
    TruncationSpec,
    sobolev_norm,
    stationary_second_moments,
    wavenumber,
)

__all__ = [
    "Boundary", "ModelParams", "RangeError", "TruncationSpec", "sobolev_norm",
    "stationary_second_moments", "wavenumber", "__version__",
]
